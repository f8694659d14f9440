//! Index trees, tree-correlated Hamiltonian ensembles and the overlap /
//! `M^d` / `kappa` bookkeeping built on them.
//!
//! Leaves of a shape `(k_1, ..., k_D)` are tuples `(u_1, ..., u_D)` with
//! `u_d` in `1..=k_d`, enumerated lexicographically. Every matrix indexed by
//! leaves uses that order.

use crate::core_model::{
    check_eval_point, norm_sq_n, on_hypercube, overlap, Hamiltonian, Landscape, Mixture, Point, Tensor,
    DEFAULT_TENSOR_BUDGET,
};
use crate::error::{arg, Error, Result};
use crate::rng::{self, label};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    ks: Vec<usize>,
}

impl TreeShape {
    pub fn new(ks: Vec<usize>) -> Result<Self> {
        if ks.is_empty() {
            return arg("tree depth must be at least 1");
        }
        if ks.contains(&0) {
            return arg("branching numbers must be positive");
        }
        if ks.iter().try_fold(1usize, |acc, &k| acc.checked_mul(k)).is_none() {
            return Err(Error::Resource(format!("leaf count of {ks:?} overflows")));
        }
        Ok(TreeShape { ks })
    }

    pub fn ks(&self) -> &[usize] {
        &self.ks
    }

    pub fn depth(&self) -> usize {
        self.ks.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.ks.iter().product()
    }

    /// Number of vertices at depth `d`.
    pub fn width(&self, d: usize) -> usize {
        self.ks[..d].iter().product()
    }

    /// Number of leaves below one depth-`d` vertex.
    fn stride(&self, d: usize) -> usize {
        self.ks[d..].iter().product()
    }

    /// Index (within its depth) of the depth-`d` ancestor of leaf `i`.
    pub fn ancestor(&self, leaf: usize, d: usize) -> usize {
        leaf / self.stride(d)
    }

    /// Leaf tuple (1-based entries) at lexicographic position `i`.
    pub fn leaf(&self, i: usize) -> Vec<usize> {
        let mut rem = i;
        let mut out = vec![0; self.depth()];
        for d in (0..self.depth()).rev() {
            out[d] = rem % self.ks[d] + 1;
            rem /= self.ks[d];
        }
        out
    }

    pub fn leaves(&self) -> Vec<Vec<usize>> {
        (0..self.num_leaves()).map(|i| self.leaf(i)).collect()
    }

    /// Depth of the least common ancestor of leaves at positions `i`, `j`.
    pub fn lca_index(&self, i: usize, j: usize) -> usize {
        (0..=self.depth()).rev().find(|&d| i / self.stride(d) == j / self.stride(d)).unwrap_or(0)
    }

    fn check_leaf(&self, u: &[usize]) -> Result<()> {
        if u.len() != self.depth() {
            return arg(format!("leaf {u:?} has length {}, tree depth is {}", u.len(), self.depth()));
        }
        for (d, (&ud, &k)) in u.iter().zip(&self.ks).enumerate() {
            if ud == 0 || ud > k {
                return arg(format!("leaf {u:?} entry {} out of 1..={k}", d + 1));
            }
        }
        Ok(())
    }
}

/// Largest `d` such that `u` and `v` agree in their first `d` entries.
pub fn lca_depth(shape: &TreeShape, u: &[usize], v: &[usize]) -> Result<usize> {
    shape.check_leaf(u)?;
    shape.check_leaf(v)?;
    Ok(u.iter().zip(v).take_while(|(a, b)| a == b).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationLadder {
    ps: Vec<f64>,
}

impl CorrelationLadder {
    pub fn new(ps: Vec<f64>) -> Result<Self> {
        if ps.len() < 2 {
            return arg("correlation ladder needs at least p_0 and p_D");
        }
        if ps[0] != 0.0 || *ps.last().unwrap() != 1.0 {
            return arg(format!("correlation ladder must run from 0 to 1, got {ps:?}"));
        }
        if ps.windows(2).any(|w| !(w[0] <= w[1])) {
            return arg(format!("correlation ladder not nondecreasing: {ps:?}"));
        }
        Ok(CorrelationLadder { ps })
    }

    pub fn ps(&self) -> &[f64] {
        &self.ps
    }

    pub fn depth(&self) -> usize {
        self.ps.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapLadder {
    qs: Vec<f64>,
}

impl OverlapLadder {
    pub fn new(qs: Vec<f64>) -> Result<Self> {
        if qs.len() < 2 {
            return arg("overlap ladder needs at least q_0 and q_D");
        }
        if !(qs[0] >= 0.0) || *qs.last().unwrap() != 1.0 {
            return arg(format!("overlap ladder must satisfy q_0 >= 0 and q_D = 1, got {qs:?}"));
        }
        if qs.windows(2).any(|w| !(w[0] < w[1])) {
            return arg(format!("overlap ladder not strictly increasing: {qs:?}"));
        }
        Ok(OverlapLadder { qs })
    }

    pub fn qs(&self) -> &[f64] {
        &self.qs
    }

    pub fn depth(&self) -> usize {
        self.qs.len() - 1
    }

    /// The `d` in `1..=D` with `q` in `[q_{d-1}, q_d)`.
    pub fn level_of(&self, q: f64) -> Result<usize> {
        let qs = &self.qs;
        if !(q >= qs[0] && q < 1.0) {
            return Err(Error::Argument(format!("q = {q} outside [q_0, 1) = [{}, 1)", qs[0])));
        }
        Ok((1..qs.len()).find(|&d| q < qs[d]).unwrap())
    }
}

fn check_depths(shape: &TreeShape, d: usize, what: &str) -> Result<()> {
    if d != shape.depth() {
        return arg(format!("{what} has depth {d}, tree has depth {}", shape.depth()));
    }
    Ok(())
}

/// Leaf weight vectors: row `u`, one column per vertex at depths `1..=D`.
pub fn weight_matrix(shape: &TreeShape, ladder: &CorrelationLadder) -> Result<DMatrix<f64>> {
    check_depths(shape, ladder.depth(), "correlation ladder")?;
    let ps = ladder.ps();
    let cols: usize = (1..=shape.depth()).map(|d| shape.width(d)).sum();
    let k = shape.num_leaves();
    let mut w = DMatrix::zeros(k, cols);
    for u in 0..k {
        let mut off = 0;
        for d in 1..=shape.depth() {
            w[(u, off + shape.ancestor(u, d))] = (ps[d] - ps[d - 1]).sqrt();
            off += shape.width(d);
        }
    }
    Ok(w)
}

pub fn target_overlap_matrix(shape: &TreeShape, q: &OverlapLadder) -> Result<DMatrix<f64>> {
    check_depths(shape, q.depth(), "overlap ladder")?;
    let k = shape.num_leaves();
    Ok(DMatrix::from_fn(k, k, |i, j| q.qs()[shape.lca_index(i, j)]))
}

/// `M^d_{u,v} = 1{u^v >= d} p_{u^v}`.
pub fn m_matrix(shape: &TreeShape, p: &CorrelationLadder, d: usize) -> Result<DMatrix<f64>> {
    check_depths(shape, p.depth(), "correlation ladder")?;
    if d == 0 || d > shape.depth() {
        return arg(format!("level d = {d} outside 1..={}", shape.depth()));
    }
    let k = shape.num_leaves();
    Ok(DMatrix::from_fn(k, k, |i, j| {
        let l = shape.lca_index(i, j);
        if l >= d {
            p.ps()[l]
        } else {
            0.0
        }
    }))
}

pub fn m_of_q(shape: &TreeShape, p: &CorrelationLadder, q: &OverlapLadder, qv: f64) -> Result<DMatrix<f64>> {
    check_depths(shape, q.depth(), "overlap ladder")?;
    m_matrix(shape, p, q.level_of(qv)?)
}

/// `kappa` on the level `[q_{d-1}, q_d)`.
pub fn kappa_level(shape: &TreeShape, p: &CorrelationLadder, d: usize) -> f64 {
    let ks = shape.ks();
    let dd = shape.depth();
    let ps = p.ps();
    let mut s = 0.0;
    for j in d..dd {
        let tail: f64 = ks[j + 1..].iter().map(|&k| k as f64).product();
        s += (ks[j] - 1) as f64 * tail * ps[j];
    }
    s + ps[dd]
}

pub fn kappa(shape: &TreeShape, p: &CorrelationLadder, q: &OverlapLadder, qv: f64) -> Result<f64> {
    check_depths(shape, p.depth(), "correlation ladder")?;
    check_depths(shape, q.depth(), "overlap ladder")?;
    Ok(kappa_level(shape, p, q.level_of(qv)?))
}

/// Correlation ladder aligned with an overlap ladder through `chi`.
pub fn chi_align(chi: &dyn Fn(f64) -> f64, q: &OverlapLadder) -> Result<CorrelationLadder> {
    const GRID: usize = 1000;
    let mut prev = chi(0.0);
    for i in 1..=GRID {
        let v = chi(i as f64 / GRID as f64);
        if v < prev - 1e-12 {
            return arg(format!("chi decreases near p = {}", i as f64 / GRID as f64));
        }
        prev = v;
    }
    let (c0, c1) = (chi(0.0), chi(1.0));
    let dd = q.depth();
    let mut ps = vec![0.0; dd + 1];
    if c1 - c0 <= 1e-15 {
        ps[1..].iter_mut().for_each(|p| *p = 1.0);
        return CorrelationLadder::new(ps);
    }
    for d in 1..dd {
        let qd = q.qs()[d];
        ps[d] = if qd > c1 {
            1.0
        } else if qd <= c0 {
            0.0
        } else {
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..200 {
                if hi - lo <= 1e-15 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if chi(mid) < qd {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
    }
    ps[dd] = 1.0;
    for d in 1..=dd {
        ps[d] = ps[d].max(ps[d - 1]);
    }
    CorrelationLadder::new(ps)
}

/// Truncated view cut at the first level with `p_d = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Underline {
    pub depth: usize,
    pub shape: TreeShape,
}

pub fn underline(shape: &TreeShape, p: &CorrelationLadder) -> Result<Underline> {
    check_depths(shape, p.depth(), "correlation ladder")?;
    let depth = (1..=shape.depth()).find(|&d| p.ps()[d] >= 1.0).unwrap();
    Ok(Underline { depth, shape: TreeShape::new(shape.ks()[..depth].to_vec())? })
}

/// `Q_{u,v} = min(q_{u^v}, chi(1))` on the truncated leaves.
pub fn underline_overlap_matrix(
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
    chi1: f64,
) -> Result<DMatrix<f64>> {
    check_depths(shape, q.depth(), "overlap ladder")?;
    let u = underline(shape, p)?;
    let k = u.shape.num_leaves();
    Ok(DMatrix::from_fn(k, k, |i, j| q.qs()[u.shape.lca_index(i, j)].min(chi1)))
}

/// `sqrt(a) A + sqrt(1-a) B` coefficientwise; both must share mixture and dimension.
pub fn correlated_mix(a: f64, h0: &Hamiltonian, h1: &Hamiltonian, seed: u64) -> Result<Hamiltonian> {
    if !(0.0..=1.0).contains(&a) {
        return arg(format!("correlation {a} outside [0, 1]"));
    }
    if h0.n() != h1.n() || h0.mixture() != h1.mixture() {
        return arg("mixing Hamiltonians with different mixtures or dimensions");
    }
    let (s0, s1) = (a.sqrt(), (1.0 - a).sqrt());
    let tensors = h0
        .tensors()
        .iter()
        .zip(h1.tensors())
        .map(|(t0, t1)| Tensor {
            p: t0.p,
            data: t0.data.iter().zip(&t1.data).map(|(x, y)| s0 * x + s1 * y).collect(),
        })
        .collect();
    Hamiltonian::from_tensors(h0.mixture(), h0.n(), seed, tensors)
}

/// Two `p`-correlated Hamiltonians sharing the component `H^[0]`.
pub fn pair_correlated(m: &Mixture, n: usize, p: f64, seed: u64) -> Result<(Hamiltonian, Hamiltonian)> {
    if !(0.0..=1.0).contains(&p) {
        return arg(format!("correlation p = {p} outside [0, 1]"));
    }
    let part = |i: u64| Hamiltonian::sample(m, n, rng::derive(seed, &[label::NODE, 0, i]), DEFAULT_TENSOR_BUDGET);
    let (h0, h1, h2) = (part(0)?, part(1)?, part(2)?);
    Ok((correlated_mix(p, &h0, &h1, seed)?, correlated_mix(p, &h0, &h2, seed)?))
}

/// Leaf Hamiltonians built from independent field-free vertex Hamiltonians.
#[derive(Debug, Clone)]
pub struct CorrelatedEnsemble {
    shape: TreeShape,
    ladder: CorrelationLadder,
    mixture: Mixture,
    n: usize,
    seed: u64,
    /// `nodes[d-1][i]` is the vertex Hamiltonian at depth `d`, index `i`;
    /// vertices with zero weight are not sampled.
    nodes: Vec<Vec<Option<Hamiltonian>>>,
    weights: Vec<f64>,
}

/// Total entries allowed across all vertex tensors of an ensemble.
pub const DEFAULT_ENSEMBLE_BUDGET: usize = 1 << 28;

pub fn sample_ensemble(
    m: &Mixture,
    n: usize,
    shape: &TreeShape,
    ladder: &CorrelationLadder,
    seed: u64,
) -> Result<CorrelatedEnsemble> {
    sample_ensemble_with_budget(m, n, shape, ladder, seed, DEFAULT_ENSEMBLE_BUDGET)
}

pub fn node_seed(seed: u64, d: usize, i: usize) -> u64 {
    rng::derive(seed, &[label::NODE, d as u64, i as u64])
}

pub fn sample_ensemble_with_budget(
    m: &Mixture,
    n: usize,
    shape: &TreeShape,
    ladder: &CorrelationLadder,
    seed: u64,
    budget: usize,
) -> Result<CorrelatedEnsemble> {
    check_depths(shape, ladder.depth(), "correlation ladder")?;
    let ps = ladder.ps();
    let weights: Vec<f64> = (1..=shape.depth()).map(|d| (ps[d] - ps[d - 1]).sqrt()).collect();
    let per_node: usize = m.support().map(|(p, _)| (n as f64).powi(p as i32) as usize).sum();
    let live: usize = (1..=shape.depth()).filter(|&d| weights[d - 1] > 0.0).map(|d| shape.width(d)).sum();
    if per_node.saturating_mul(live) > budget {
        return Err(Error::Resource(format!(
            "ensemble needs {live} vertex Hamiltonians of {per_node} entries, budget is {budget}"
        )));
    }
    let mut nodes = Vec::with_capacity(shape.depth());
    for d in 1..=shape.depth() {
        let mut level = Vec::with_capacity(shape.width(d));
        for i in 0..shape.width(d) {
            level.push(if weights[d - 1] > 0.0 {
                Some(Hamiltonian::sample(m, n, node_seed(seed, d, i), DEFAULT_TENSOR_BUDGET)?)
            } else {
                None
            });
        }
        nodes.push(level);
    }
    Ok(CorrelatedEnsemble { shape: shape.clone(), ladder: ladder.clone(), mixture: m.clone(), n, seed, nodes, weights })
}

impl CorrelatedEnsemble {
    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }
    pub fn ladder(&self) -> &CorrelationLadder {
        &self.ladder
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn leaf(&self, u: usize) -> LeafHamiltonian<'_> {
        LeafHamiltonian { ens: self, leaf: u }
    }

    /// Leaf `u` as a standalone Hamiltonian with coefficients `sum_d w_d g^(d)`.
    pub fn leaf_hamiltonian(&self, u: usize) -> Result<Hamiltonian> {
        if u >= self.shape.num_leaves() {
            return arg(format!("leaf {u} out of range"));
        }
        let mut coeffs: Option<Vec<f64>> = None;
        let mut template = None;
        for (w, h) in self.parts(u) {
            let c = h.coefficients();
            match coeffs.as_mut() {
                None => coeffs = Some(c.iter().map(|v| w * v).collect()),
                Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += w * v),
            }
            template.get_or_insert(h);
        }
        let seed = rng::derive(self.seed, &[label::NODE, u64::MAX, u as u64]);
        match (template, coeffs) {
            (Some(h), Some(c)) => {
                let out = h.with_coefficients(&c)?;
                Hamiltonian::from_tensors(&self.mixture, self.n, seed, out.tensors().to_vec())
            }
            _ => {
                let tensors = self
                    .mixture
                    .support()
                    .map(|(p, _)| Tensor { p, data: vec![0.0; self.n.pow(p)] })
                    .collect();
                Hamiltonian::from_tensors(&self.mixture, self.n, seed, tensors)
            }
        }
    }

    fn parts(&self, u: usize) -> impl Iterator<Item = (f64, &Hamiltonian)> + '_ {
        (1..=self.shape.depth()).filter_map(move |d| {
            let w = self.weights[d - 1];
            self.nodes[d - 1][self.shape.ancestor(u, d)].as_ref().map(|h| (w, h))
        })
    }

    /// Manifest plus one snapshot per sampled vertex, written into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut list = Vec::new();
        for (d, level) in self.nodes.iter().enumerate() {
            for (i, h) in level.iter().enumerate() {
                let Some(h) = h else { continue };
                let file = format!("node_d{}_i{}.bin", d + 1, i);
                h.write_snapshot(std::io::BufWriter::new(std::fs::File::create(dir.join(&file))?))?;
                list.push(serde_json::json!({
                    "depth": d + 1, "index": i, "path": self.shape.leaf(i * self.shape.stride(d + 1))[..d + 1],
                    "seed": h.seed(), "weight": self.weights[d], "snapshot": file,
                }));
            }
        }
        let manifest = serde_json::json!({
            "shape": self.shape.ks(), "ladder": self.ladder.ps(), "mixture": self.mixture,
            "n": self.n, "seed": self.seed, "leaf_order": "lexicographic", "nodes": list,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
        Ok(())
    }
}

pub struct LeafHamiltonian<'a> {
    ens: &'a CorrelatedEnsemble,
    leaf: usize,
}

impl Landscape for LeafHamiltonian<'_> {
    fn dim(&self) -> usize {
        self.ens.n
    }

    fn mixture(&self) -> &Mixture {
        &self.ens.mixture
    }

    fn energy(&self, x: &Point) -> Result<f64> {
        check_eval_point(self.ens.n, x)?;
        let e: f64 = self.ens.parts(self.leaf).map(|(w, h)| w * h.field_free_energy_raw(x.as_slice())).sum();
        Ok(self.ens.mixture.h() * x.sum() + e)
    }

    fn gradient(&self, x: &Point) -> Result<Point> {
        check_eval_point(self.ens.n, x)?;
        let mut g = Point::from_element(self.ens.n, self.ens.mixture.h());
        for (w, h) in self.ens.parts(self.leaf) {
            g.axpy(w, &Point::from_vec(h.derivative_contract(x.as_slice(), &[])), 1.0);
        }
        Ok(g)
    }

    fn hessian(&self, x: &Point) -> Result<DMatrix<f64>> {
        let n = self.ens.n;
        let mut hm = DMatrix::zeros(n, n);
        for (w, h) in self.ens.parts(self.leaf) {
            hm += h.hessian(x)? * w;
        }
        check_eval_point(n, x)?;
        Ok(hm)
    }

    fn hessian_apply(&self, x: &Point, v: &Point) -> Result<Point> {
        let mut out = Point::zeros(self.ens.n);
        for (w, h) in self.ens.parts(self.leaf) {
            out.axpy(w, &h.hessian_apply(x, v)?, 1.0);
        }
        check_eval_point(self.ens.n, x)?;
        Ok(out)
    }
}

/// Sum of leaf energies, leaves in lexicographic order.
pub fn grand_energy(e: &CorrelatedEnsemble, sigmas: &[Point]) -> Result<f64> {
    if sigmas.len() != e.shape.num_leaves() {
        return arg(format!("expected {} points, got {}", e.shape.num_leaves(), sigmas.len()));
    }
    sigmas.iter().enumerate().map(|(u, s)| e.leaf(u).energy(s)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpinDomain {
    Sphere,
    Ising,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    None,
    Norm { leaf: usize },
    Band { leaf: usize },
    Overlap { u: usize, v: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct MembershipReport {
    pub member: bool,
    /// Largest amount by which any constraint is exceeded (0 if none).
    pub worst: f64,
    pub kind: Violation,
    pub max_overlap_dev: f64,
}

/// Tolerance on the domain constraint (sphere norm or `+-1` entries).
pub const DOMAIN_TOL: f64 = 1e-9;

/// Membership of `sigmas` in the constrained set with target `q`, centre `m`, slack `eta`.
pub fn constrained_membership(
    sigmas: &[Point],
    q: &DMatrix<f64>,
    m: &Point,
    eta: f64,
    domain: SpinDomain,
) -> MembershipReport {
    let mut worst = 0.0;
    let mut kind = Violation::None;
    let bump = |amount: f64, k: Violation, worst: &mut f64, kind: &mut Violation| {
        if amount > *worst {
            *worst = amount;
            *kind = k;
        }
    };
    let q0 = norm_sq_n(m);
    for (u, s) in sigmas.iter().enumerate() {
        let dom = match domain {
            SpinDomain::Sphere => (norm_sq_n(s) - 1.0).abs(),
            SpinDomain::Ising => {
                if on_hypercube(s, 0.0) {
                    0.0
                } else {
                    s.iter().map(|v| (v.abs() - 1.0).abs()).fold(0.0, f64::max)
                }
            }
        };
        if dom > DOMAIN_TOL {
            bump(dom, Violation::Norm { leaf: u }, &mut worst, &mut kind);
        }
        let band = (overlap(s, m) - q0).abs() - eta;
        if band > 0.0 {
            bump(band, Violation::Band { leaf: u }, &mut worst, &mut kind);
        }
    }
    let mut dev_max = 0.0f64;
    if q.nrows() != sigmas.len() || q.ncols() != sigmas.len() {
        return MembershipReport { member: false, worst: f64::INFINITY, kind: Violation::Overlap { u: 0, v: 0 }, max_overlap_dev: f64::INFINITY };
    }
    for u in 0..sigmas.len() {
        for v in u..sigmas.len() {
            let dev = (overlap(&sigmas[u], &sigmas[v]) - q[(u, v)]).abs();
            dev_max = dev_max.max(dev);
            if dev - eta > 0.0 {
                bump(dev - eta, Violation::Overlap { u, v }, &mut worst, &mut kind);
            }
        }
    }
    MembershipReport { member: kind == Violation::None, worst, kind, max_overlap_dev: dev_max }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lca_examples() {
        let s = TreeShape::new(vec![2, 2]).unwrap();
        assert_eq!(lca_depth(&s, &[1, 1], &[1, 2]).unwrap(), 1);
        assert_eq!(lca_depth(&s, &[2, 1], &[2, 1]).unwrap(), 2);
        let s3 = TreeShape::new(vec![3, 2, 2]).unwrap();
        assert_eq!(lca_depth(&s3, &[2, 1, 1], &[3, 1, 1]).unwrap(), 0);
        assert!(lca_depth(&s3, &[2, 1], &[3, 1, 1]).is_err());
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(s3.lca_index(i, j), lca_depth(&s3, &s3.leaf(i), &s3.leaf(j)).unwrap());
            }
        }
    }

    #[test]
    fn kappa_unrolled() {
        let s = TreeShape::new(vec![1, 5]).unwrap();
        let p = CorrelationLadder::new(vec![0.0, 0.25, 1.0]).unwrap();
        let q = OverlapLadder::new(vec![0.1, 0.5, 1.0]).unwrap();
        assert_eq!(kappa(&s, &p, &q, 0.2).unwrap(), 4.0 * 0.25 + 1.0);
        assert_eq!(kappa(&s, &p, &q, 0.7).unwrap(), 1.0);
        assert!(kappa(&s, &p, &q, 1.0).is_err());
    }

    #[test]
    fn chi_align_examples() {
        let q = OverlapLadder::new(vec![0.0, 0.4, 1.0]).unwrap();
        let p = chi_align(&|x| x, &q).unwrap();
        assert!((p.ps()[1] - 0.4).abs() < 1e-12);
        let qc = OverlapLadder::new(vec![0.2, 0.6, 1.0]).unwrap();
        assert_eq!(chi_align(&|_| 0.2, &qc).unwrap().ps(), &[0.0, 1.0, 1.0]);
        let q2 = OverlapLadder::new(vec![0.0, 0.49, 1.0]).unwrap();
        assert!((chi_align(&|x| x * x, &q2).unwrap().ps()[1] - 0.7).abs() < 1e-10);
        assert!(chi_align(&|x| 1.0 - x, &q2).is_err());
    }

    #[test]
    fn underline_cut() {
        let s = TreeShape::new(vec![2, 3, 2]).unwrap();
        let p = CorrelationLadder::new(vec![0.0, 0.5, 1.0, 1.0]).unwrap();
        let q = OverlapLadder::new(vec![0.0, 0.3, 0.8, 1.0]).unwrap();
        let u = underline(&s, &p).unwrap();
        assert_eq!(u.depth, 2);
        let qm = underline_overlap_matrix(&s, &p, &q, 0.6).unwrap();
        assert_eq!(qm.nrows(), 6);
        assert_eq!(qm[(0, 0)], 0.6);
        assert_eq!(qm[(0, 1)], 0.3);
        assert_eq!(qm[(0, 3)], 0.0);
    }
}
