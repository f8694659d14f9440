//! Dated rooted trees, their ultrametrics and Euclidean embeddings.

use crate::core_model::{norm_sq_n, overlap, Landscape, Mixture, Point};
use crate::error::{arg, Error, Result};
use crate::quad;
use crate::rng::{self, label};
use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Comparison slack on heights.
pub const HEIGHT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub height: f64,
}

/// Exchange format `{vertices: [{id, parent, height}], range: [a, b]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub vertices: Vec<VertexRecord>,
    pub range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatedRootedTree {
    ids: Vec<usize>,
    parent: Vec<Option<usize>>,
    height: Vec<f64>,
    children: Vec<Vec<usize>>,
    root: usize,
    range: (f64, f64),
}

impl DatedRootedTree {
    /// Vertices are given by external id; internal indices follow input order.
    pub fn new(vertices: &[VertexRecord], range: (f64, f64)) -> Result<Self> {
        let (a, b) = range;
        if !(a.is_finite() && b.is_finite() && a <= b && a >= 0.0) {
            return arg(format!("range [{a}, {b}] must satisfy 0 <= a <= b"));
        }
        if vertices.is_empty() {
            return arg("tree has no vertices");
        }
        let mut index = BTreeMap::new();
        for (i, v) in vertices.iter().enumerate() {
            if index.insert(v.id, i).is_some() {
                return Err(Error::Format(format!("duplicate vertex id {}", v.id)));
            }
        }
        let nv = vertices.len();
        let mut parent = vec![None; nv];
        let mut children = vec![Vec::new(); nv];
        let mut root = None;
        for (i, v) in vertices.iter().enumerate() {
            match v.parent {
                None => {
                    if root.replace(i).is_some() {
                        return arg("tree has more than one root");
                    }
                }
                Some(pid) => {
                    let p = *index.get(&pid).ok_or_else(|| Error::Format(format!("unknown parent id {pid}")))?;
                    parent[i] = Some(p);
                    children[p].push(i);
                }
            }
        }
        let root = root.ok_or_else(|| Error::Argument("tree has no root".into()))?;
        let height: Vec<f64> = vertices.iter().map(|v| v.height).collect();
        if (height[root] - a).abs() > HEIGHT_EPS {
            return arg(format!("root height {} differs from a = {a}", height[root]));
        }
        let mut seen = vec![false; nv];
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            seen[v] = true;
            for &c in &children[v] {
                if !(height[c] > height[v] + HEIGHT_EPS) {
                    return arg(format!("vertex {} is not above its parent", vertices[c].id));
                }
                stack.push(c);
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return arg(format!("vertex {} is not reachable from the root", vertices[i].id));
        }
        for i in 0..nv {
            if !(height[i] >= a - HEIGHT_EPS && height[i] <= b + HEIGHT_EPS) {
                return arg(format!("height of vertex {} is outside [{a}, {b}]", vertices[i].id));
            }
            if children[i].is_empty() && (height[i] - b).abs() > HEIGHT_EPS {
                return arg(format!("leaf {} is not at height b = {b}", vertices[i].id));
            }
        }
        let ids = vertices.iter().map(|v| v.id).collect();
        Ok(DatedRootedTree { ids, parent, height, children, root, range })
    }

    pub fn from_file(f: &TreeFile) -> Result<Self> {
        Self::new(&f.vertices, (f.range[0], f.range[1]))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: TreeFile = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_file(&f)
    }

    pub fn to_file(&self) -> TreeFile {
        let vertices = (0..self.len())
            .map(|i| VertexRecord { id: self.ids[i], parent: self.parent[i].map(|p| self.ids[p]), height: self.height[i] })
            .collect();
        TreeFile { vertices, range: [self.range.0, self.range.1] }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("tree serializes")
    }

    /// Chain `a = h_0 < h_1 < ... < h_k = b`.
    pub fn chain(heights: &[f64]) -> Result<Self> {
        let vs: Vec<VertexRecord> = heights
            .iter()
            .enumerate()
            .map(|(i, &h)| VertexRecord { id: i, parent: i.checked_sub(1), height: h })
            .collect();
        Self::new(&vs, (heights[0], *heights.last().unwrap_or(&0.0)))
    }

    /// Root at `a` with `k` leaves at `b`.
    pub fn star(k: usize, a: f64, b: f64) -> Result<Self> {
        let mut vs = vec![VertexRecord { id: 0, parent: None, height: a }];
        vs.extend((1..=k).map(|i| VertexRecord { id: i, parent: Some(0), height: b }));
        Self::new(&vs, (a, b))
    }

    /// Full binary tree of the given depth; `heights[d]` is the height of depth-`d` vertices.
    pub fn full_binary(heights: &[f64]) -> Result<Self> {
        let depth = heights.len().saturating_sub(1);
        let total = (1usize << (depth + 1)) - 1;
        let vs: Vec<VertexRecord> = (0..total)
            .map(|i| {
                let d = (usize::BITS - (i + 1).leading_zeros() - 1) as usize;
                VertexRecord { id: i, parent: if i == 0 { None } else { Some((i - 1) / 2) }, height: heights[d] }
            })
            .collect();
        Self::new(&vs, (heights[0], heights[depth]))
    }

    pub fn len(&self) -> usize {
        self.height.len()
    }

    pub fn is_empty(&self) -> bool {
        self.height.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn id(&self, v: usize) -> usize {
        self.ids[v]
    }

    pub fn height(&self, v: usize) -> f64 {
        self.height[v]
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.children[v].is_empty()).collect()
    }

    /// Vertices with every parent before its children.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.children[v].iter().rev());
        }
        out
    }

    fn depth_of(&self, mut v: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent[v] {
            v = p;
            d += 1;
        }
        d
    }

    pub fn lca(&self, u: usize, v: usize) -> usize {
        let (mut u, mut v) = (u, v);
        let (mut du, mut dv) = (self.depth_of(u), self.depth_of(v));
        while du > dv {
            u = self.parent[u].unwrap();
            du -= 1;
        }
        while dv > du {
            v = self.parent[v].unwrap();
            dv -= 1;
        }
        while u != v {
            u = self.parent[u].unwrap();
            v = self.parent[v].unwrap();
        }
        u
    }
}

/// `d(u, v) = sqrt(|u| + |v| - 2 |u ^ v|)`.
pub fn tree_metric(t: &DatedRootedTree, u: usize, v: usize) -> f64 {
    if u == v {
        return 0.0;
    }
    let w = t.lca(u, v);
    (t.height[u] + t.height[v] - 2.0 * t.height[w]).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// `points[v]` for internal vertex index `v`.
    pub points: Vec<Point>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    /// One row per vertex: id followed by the N coordinates.
    pub fn to_csv(&self, t: &DatedRootedTree) -> String {
        let mut s = String::new();
        s.push_str("vertex");
        for i in 0..self.dim() {
            let _ = write!(s, ",x{i}");
        }
        s.push('\n');
        for (v, p) in self.points.iter().enumerate() {
            let _ = write!(s, "{}", t.id(v));
            for c in p.iter() {
                let _ = write!(s, ",{c:?}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Condition {
    RootNorm,
    IncrementNorm { vertex: usize },
    Orthogonality { u: usize, v: usize },
    Overlap { u: usize, v: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct Validation {
    pub valid: bool,
    /// Largest violation over both checks, in overlap units.
    pub worst: f64,
    /// Worst failing condition (vertex ids), if any.
    pub condition: Option<Condition>,
    pub criterion_ok: bool,
    pub direct_ok: bool,
}

/// Checks the increment criterion (root norm, increment norms, pairwise
/// orthogonal increments) and the defining identity `R(iota(u), iota(v)) = |u ^ v|`.
pub fn validate_embedding(t: &DatedRootedTree, emb: &Embedding, tol: f64) -> Validation {
    let nv = t.len();
    if emb.points.len() != nv || emb.points.iter().any(|p| p.len() != emb.dim() || p.is_empty()) {
        return Validation { valid: false, worst: f64::INFINITY, condition: None, criterion_ok: false, direct_ok: false };
    }
    let mut crit: (f64, Option<Condition>) = (0.0, None);
    let bump = |slot: &mut (f64, Option<Condition>), dev: f64, c: Condition| {
        if dev > slot.0 {
            *slot = (dev, Some(c));
        }
    };
    let incr: Vec<Point> = (0..nv)
        .map(|v| match t.parent[v] {
            Some(p) => &emb.points[v] - &emb.points[p],
            None => emb.points[v].clone(),
        })
        .collect();
    bump(&mut crit, (norm_sq_n(&emb.points[t.root]) - t.range.0).abs(), Condition::RootNorm);
    for v in 0..nv {
        let want = t.height[v] - t.parent[v].map_or(0.0, |p| t.height[p]);
        bump(&mut crit, (norm_sq_n(&incr[v]) - want).abs(), Condition::IncrementNorm { vertex: t.ids[v] });
        for u in 0..v {
            bump(&mut crit, overlap(&incr[u], &incr[v]).abs(), Condition::Orthogonality { u: t.ids[u], v: t.ids[v] });
        }
    }
    let mut direct: (f64, Option<Condition>) = (0.0, None);
    for v in 0..nv {
        for u in 0..=v {
            let want = t.height[t.lca(u, v)];
            bump(&mut direct, (overlap(&emb.points[u], &emb.points[v]) - want).abs(), Condition::Overlap { u: t.ids[u], v: t.ids[v] });
        }
    }
    let criterion_ok = crit.0 <= tol;
    let direct_ok = direct.0 <= tol;
    let (worst, condition) = if crit.0 >= direct.0 { crit } else { direct };
    Validation {
        valid: criterion_ok && direct_ok,
        worst,
        condition: if criterion_ok && direct_ok { None } else { condition },
        criterion_ok,
        direct_ok,
    }
}

fn random_frame(n: usize, k: usize, seed: u64) -> Result<Vec<Point>> {
    if k > n {
        return Err(Error::Resource(format!("need {k} orthogonal directions in dimension {n}")));
    }
    let mut r = rng::stream(seed, &[label::BASIS]);
    let g = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut r));
    let q = g.qr().q();
    Ok((0..k).map(|j| q.column(j).into_owned()).collect())
}

/// Each increment along a fresh direction of a seeded orthonormal frame.
pub fn embed_orthogonal(t: &DatedRootedTree, n: usize, seed: u64) -> Result<Embedding> {
    if n < t.len() + 1 {
        return Err(Error::Resource(format!("embedding {} vertices needs N >= {}, got {n}", t.len(), t.len() + 1)));
    }
    let frame = random_frame(n, t.len(), seed)?;
    let nf = n as f64;
    let mut points = vec![Point::zeros(n); t.len()];
    for (k, v) in t.preorder().into_iter().enumerate() {
        let (base, h0) = match t.parent[v] {
            Some(p) => (points[p].clone(), t.height[p]),
            None => (Point::zeros(n), 0.0),
        };
        points[v] = base + &frame[k] * ((t.height[v] - h0) * nf).sqrt();
    }
    Ok(Embedding { points })
}

/// Per-vertex `D(v)`: 0 at leaves, `max(m1, m2 + 1)` over the two largest child values.
pub fn branching_depths(t: &DatedRootedTree) -> Vec<usize> {
    let mut d = vec![0usize; t.len()];
    for &v in t.preorder().iter().rev() {
        let mut vals: Vec<usize> = t.children[v].iter().map(|&c| d[c]).collect();
        vals.sort_unstable_by(|a, b| b.cmp(a));
        d[v] = match vals.len() {
            0 => 0,
            1 => vals[0],
            _ => vals[0].max(vals[1] + 1),
        };
    }
    d
}

pub fn branching_depth(t: &DatedRootedTree) -> usize {
    branching_depths(t)[t.root]
}

/// `V_D = {v : D(v) = D(T)}`, sorted by height.
pub fn vd_set(t: &DatedRootedTree) -> Vec<usize> {
    let d = branching_depths(t);
    let top = d[t.root];
    let mut vs: Vec<usize> = (0..t.len()).filter(|&v| d[v] == top).collect();
    vs.sort_by(|&a, &b| t.height[a].total_cmp(&t.height[b]));
    vs
}

/// Whether `set`, sorted by height, is a parent-linked path starting at the root.
pub fn is_root_path(t: &DatedRootedTree, set: &[usize]) -> bool {
    let mut s = set.to_vec();
    s.sort_by(|&a, &b| t.height[a].total_cmp(&t.height[b]));
    !s.is_empty() && s[0] == t.root && s.windows(2).all(|w| t.parent[w[1]] == Some(w[0]))
}

/// Components of the tree cut to heights `[lo, hi]`, subdividing edges that
/// cross either end.
pub fn restrict(t: &DatedRootedTree, lo: f64, hi: f64) -> Result<Vec<DatedRootedTree>> {
    let (a, b) = t.range;
    if !(lo >= a - HEIGHT_EPS && hi <= b + HEIGHT_EPS && lo <= hi) {
        return arg(format!("window [{lo}, {hi}] must lie inside [{a}, {b}]"));
    }
    // Subdivide into a working vertex list.
    let mut ids = t.ids.clone();
    let mut parent = t.parent.clone();
    let mut height = t.height.clone();
    let mut next_id = ids.iter().max().map_or(0, |m| m + 1);
    for cut in [lo, hi] {
        for v in 0..parent.len() {
            if let Some(p) = parent[v] {
                if height[p] < cut - HEIGHT_EPS && height[v] > cut + HEIGHT_EPS {
                    ids.push(next_id);
                    next_id += 1;
                    parent.push(Some(p));
                    height.push(cut);
                    parent[v] = Some(ids.len() - 1);
                }
            }
        }
    }
    let inside = |h: f64| h >= lo - HEIGHT_EPS && h <= hi + HEIGHT_EPS;
    let mut out = Vec::new();
    for r in 0..ids.len() {
        if (height[r] - lo).abs() > HEIGHT_EPS {
            continue;
        }
        let mut vs = vec![VertexRecord { id: ids[r], parent: None, height: lo }];
        let mut stack = vec![r];
        while let Some(v) = stack.pop() {
            if (height[v] - hi).abs() <= HEIGHT_EPS {
                continue;
            }
            for c in 0..ids.len() {
                if parent[c] == Some(v) && inside(height[c]) {
                    let h = if (height[c] - hi).abs() <= HEIGHT_EPS { hi } else { height[c] };
                    vs.push(VertexRecord { id: ids[c], parent: Some(ids[v]), height: h });
                    stack.push(c);
                }
            }
        }
        out.push(DatedRootedTree::new(&vs, (lo, hi))?);
    }
    Ok(out)
}

/// Removes non-root vertices with exactly one child.
pub fn reduce(t: &DatedRootedTree) -> Result<DatedRootedTree> {
    let keep = |v: usize| v == t.root || t.children[v].len() != 1;
    let mut vs = Vec::new();
    for v in t.preorder() {
        if !keep(v) {
            continue;
        }
        let mut p = t.parent[v];
        while let Some(pp) = p {
            if keep(pp) {
                break;
            }
            p = t.parent[pp];
        }
        vs.push(VertexRecord { id: t.ids[v], parent: p.map(|x| t.ids[x]), height: t.height[v] });
    }
    DatedRootedTree::new(&vs, t.range)
}

/// `int_0^q sqrt(xi'')`.
pub fn alg_sp_at(m: &Mixture, q: f64) -> f64 {
    quad::integrate(|s| m.xi2(s).max(0.0).sqrt(), 0.0, q, quad::ABS_TOL)
}

#[derive(Debug, Clone)]
pub struct GreedyEmbedding {
    pub embedding: Embedding,
    /// `H(iota(v)) / N` per vertex.
    pub energies: Vec<f64>,
    /// `ALG(|v|) - ALG(a) + H(iota(root)) / N`, reported alongside.
    pub reference: Vec<f64>,
    pub steps: usize,
}

/// Top Hessian direction at `x` within the orthogonal complement of `used`.
fn top_free_direction<L: Landscape + ?Sized>(h: &L, x: &Point, used: &[Point]) -> Result<Point> {
    let n = h.dim();
    let mut comp: Vec<Point> = Vec::with_capacity(n - used.len());
    let mut all: Vec<Point> = used.to_vec();
    for i in 0..n {
        let mut e = Point::zeros(n);
        e[i] = 1.0;
        for _ in 0..2 {
            for b in &all {
                let c = e.dot(b);
                e.axpy(-c, b, 1.0);
            }
        }
        let en = e.norm();
        if en > 1e-6 {
            e /= en;
            all.push(e.clone());
            comp.push(e);
        }
        if comp.len() + used.len() == n {
            break;
        }
    }
    if comp.is_empty() {
        return Err(Error::Resource(format!("no free directions left in dimension {n}")));
    }
    let c = DMatrix::from_columns(&comp);
    let hm = h.hessian(x)?;
    let mut s = c.transpose() * hm * &c;
    s = (&s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let v = &c * eig.eigenvectors.column(eig.eigenvalues.imax());
    let mut v = v.normalize();
    if h.gradient(x)?.dot(&v) < 0.0 {
        v = -v;
    }
    Ok(v)
}

/// Root-to-leaf walk with Subag-style steps of squared length at most `delta`,
/// each orthogonal to every earlier step, so the result is an exact embedding.
pub fn embed_energy_greedy<L: Landscape + ?Sized>(h: &L, t: &DatedRootedTree, delta: f64) -> Result<GreedyEmbedding> {
    if !(delta > 0.0 && delta <= 1.0) {
        return arg(format!("delta = {delta} must lie in (0, 1]"));
    }
    let n = h.dim();
    let nf = n as f64;
    let seg = |len: f64| if len <= 0.0 { 0 } else { (len / delta - 1e-9).ceil().max(1.0) as usize };
    let total: usize = (0..t.len())
        .map(|v| seg(t.height[v] - t.parent[v].map_or(0.0, |p| t.height[p])))
        .sum();
    if total >= n {
        return Err(Error::Resource(format!("{total} orthogonal steps do not fit in dimension {n}")));
    }
    let mut used: Vec<Point> = Vec::with_capacity(total);
    let mut points = vec![Point::zeros(n); t.len()];
    for v in t.preorder() {
        let (mut x, h0) = match t.parent[v] {
            Some(p) => (points[p].clone(), t.height[p]),
            None => (Point::zeros(n), 0.0),
        };
        let len = t.height[v] - h0;
        let k = seg(len);
        for _ in 0..k {
            let d = top_free_direction(h, &x, &used)?;
            x.axpy((len / k as f64 * nf).sqrt(), &d, 1.0);
            used.push(d);
        }
        points[v] = x;
    }
    let energies = points.iter().map(|p| h.energy(p).map(|e| e / nf)).collect::<Result<Vec<_>>>()?;
    let m = h.mixture();
    let base = energies[t.root] - alg_sp_at(m, t.range.0);
    let reference = (0..t.len()).map(|v| base + alg_sp_at(m, t.height[v])).collect();
    Ok(GreedyEmbedding { embedding: Embedding { points }, energies, reference, steps: used.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_metric() {
        let t = DatedRootedTree::star(4, 0.0, 1.0).unwrap();
        assert_eq!(tree_metric(&t, 1, 2), 2f64.sqrt());
        assert_eq!(tree_metric(&t, 3, 3), 0.0);
        assert_eq!(branching_depth(&t), 1);
    }

    #[test]
    fn reduce_chain() {
        let t = DatedRootedTree::chain(&[0.0, 0.3, 0.6, 1.0]).unwrap();
        let r = reduce(&t).unwrap();
        assert_eq!(r.len(), 2);
    }
}
