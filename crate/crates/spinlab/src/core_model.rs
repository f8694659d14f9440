//! Mixture functions, Gaussian disorder and evaluation of `H_N`.
//!
//! The Hamiltonian is
//! `H(x) = h <1, x> + sum_p gamma_p N^{-(p-1)/2} <G^(p), x^{(x)p}>`
//! with raw (unsymmetrized) i.i.d. standard normal tensors `G^(p)`, so that
//! `E H~(x) H~(y) = N xi(R(x, y))`.

use crate::error::{arg, Error, Result};
use crate::rng::{self, label};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{Read, Write};

pub type Point = DVector<f64>;

/// Largest number of entries allowed in a single disorder tensor.
pub const DEFAULT_TENSOR_BUDGET: usize = 1 << 27;
/// Largest dimension for which a dense Hessian is formed.
pub const DENSE_HESSIAN_CAP: usize = 2048;
/// Points must satisfy `||x||_N <= EVAL_RADIUS`.
pub const EVAL_RADIUS: f64 = std::f64::consts::SQRT_2;
/// Cap on alternating-maximization rounds per probe trial.
const PROBE_ROUNDS: usize = 60;
const RADIUS_SLACK: f64 = 1e-12;

const SNAPSHOT_MAGIC: &[u8; 8] = b"SPNLBHAM";
const SNAPSHOT_VERSION: u32 = 1;

/// Even mixture `xi(x) = sum_p gamma_p^2 x^p` together with the field `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    gammas: BTreeMap<u32, f64>,
    h: f64,
}

impl Mixture {
    /// Zero coefficients are dropped from the table.
    pub fn new(gammas: &[(u32, f64)], h: f64) -> Result<Self> {
        if !(h.is_finite() && h >= 0.0) {
            return arg(format!("field h must be finite and nonnegative, got {h}"));
        }
        let mut table = BTreeMap::new();
        for &(p, g) in gammas {
            if p < 2 || p % 2 != 0 {
                return arg(format!("degree {p} is not an even integer >= 2"));
            }
            if !(g.is_finite() && g >= 0.0) {
                return arg(format!("gamma_{p} must be finite and nonnegative, got {g}"));
            }
            if table.insert(p, g).is_some() {
                return arg(format!("degree {p} listed twice"));
            }
        }
        table.retain(|_, g| *g > 0.0);
        if table.is_empty() && h == 0.0 {
            return arg("mixture has no positive coefficient and no field");
        }
        Ok(Mixture { gammas: table, h })
    }

    /// `gamma_p = 1` for a single degree.
    pub fn pure(p: u32, h: f64) -> Result<Self> {
        Self::new(&[(p, 1.0)], h)
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn gammas(&self) -> &BTreeMap<u32, f64> {
        &self.gammas
    }

    pub fn support(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.gammas.iter().map(|(&p, &g)| (p, g))
    }

    pub fn max_degree(&self) -> u32 {
        self.gammas.keys().next_back().copied().unwrap_or(0)
    }

    pub fn with_field(&self, h: f64) -> Result<Self> {
        let g: Vec<_> = self.support().collect();
        Self::new(&g, h)
    }

    /// `order`-th derivative of `xi` at `x`, computed term by term.
    pub fn deriv(&self, x: f64, order: u32) -> f64 {
        self.gammas
            .iter()
            .filter(|(&p, _)| p >= order)
            .map(|(&p, &g)| {
                let falling: f64 = (0..order).map(|i| (p - i) as f64).product();
                g * g * falling * x.powi((p - order) as i32)
            })
            .sum()
    }

    pub fn xi(&self, x: f64) -> f64 {
        self.deriv(x, 0)
    }
    pub fn xi1(&self, x: f64) -> f64 {
        self.deriv(x, 1)
    }
    pub fn xi2(&self, x: f64) -> f64 {
        self.deriv(x, 2)
    }
    pub fn xi3(&self, x: f64) -> f64 {
        self.deriv(x, 3)
    }
}

/// Checked derivative of the mixture function; `order <= 4`, `x` in `[-1, 2]`.
pub fn xi_eval(m: &Mixture, x: f64, order: u32) -> Result<f64> {
    if order > 4 {
        return arg(format!("derivative order {order} unsupported (max 4)"));
    }
    if !(-1.0..=2.0).contains(&x) {
        return Err(Error::Domain(format!("xi evaluated at {x}, outside [-1, 2]")));
    }
    Ok(m.deriv(x, order))
}

pub fn norm_sq_n(x: &Point) -> f64 {
    x.norm_squared() / x.len() as f64
}

/// Normalized inner product `<x, y> / N`.
pub fn overlap(x: &Point, y: &Point) -> f64 {
    x.dot(y) / x.len() as f64
}

pub fn on_sphere(x: &Point, tol: f64) -> bool {
    (norm_sq_n(x) - 1.0).abs() <= tol
}

pub fn on_hypercube(x: &Point, tol: f64) -> bool {
    x.iter().all(|v| (v.abs() - 1.0).abs() <= tol)
}

pub fn in_ball(x: &Point, r: f64, tol: f64) -> bool {
    norm_sq_n(x).sqrt() <= r + tol
}

pub fn in_cube(x: &Point, r: f64, tol: f64) -> bool {
    x.iter().all(|v| v.abs() <= r + tol)
}

/// Uniform point on the sphere of radius `r sqrt(N)`.
pub fn random_on_sphere(n: usize, r: f64, rng: &mut rng::Rng) -> Point {
    loop {
        let g = Point::from_fn(n, |_, _| rng.sample(StandardNormal));
        let nn = g.norm();
        if nn > 0.0 {
            return g * (r * (n as f64).sqrt() / nn);
        }
    }
}

/// Dimension and evaluation-radius check shared by all landscapes.
pub fn check_eval_point(n: usize, x: &Point) -> Result<()> {
    if x.len() != n {
        return arg(format!("point has dimension {}, expected {n}", x.len()));
    }
    let r = norm_sq_n(x).sqrt();
    if !(r <= EVAL_RADIUS + RADIUS_SLACK) {
        return Err(Error::Domain(format!("||x||_N = {r} exceeds evaluation radius sqrt(2)")));
    }
    Ok(())
}

/// Read-only landscape interface shared by single and leaf Hamiltonians.
pub trait Landscape: Sync {
    fn dim(&self) -> usize;
    fn mixture(&self) -> &Mixture;
    fn energy(&self, x: &Point) -> Result<f64>;
    fn gradient(&self, x: &Point) -> Result<Point>;
    fn hessian(&self, x: &Point) -> Result<DMatrix<f64>>;
    fn hessian_apply(&self, x: &Point, w: &Point) -> Result<Point>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub p: u32,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    mixture: Mixture,
    n: usize,
    seed: u64,
    tensors: Vec<Tensor>,
}

fn tensor_len(n: usize, p: u32) -> Option<usize> {
    (n as u128)
        .checked_pow(p)
        .and_then(|v| usize::try_from(v).ok())
}

/// Sample with the default per-tensor budget.
pub fn sample_hamiltonian(m: &Mixture, n: usize, seed: u64) -> Result<Hamiltonian> {
    Hamiltonian::sample(m, n, seed, DEFAULT_TENSOR_BUDGET)
}

impl Hamiltonian {
    pub fn sample(m: &Mixture, n: usize, seed: u64, budget: usize) -> Result<Self> {
        if n == 0 {
            return arg("dimension must be at least 1");
        }
        let mut tensors = Vec::new();
        for (p, _) in m.support() {
            let len = match tensor_len(n, p) {
                Some(l) if l <= budget => l,
                _ => {
                    return Err(Error::Resource(format!(
                        "tensor for p={p} at N={n} needs {n}^{p} entries, budget is {budget}"
                    )))
                }
            };
            let mut r = rng::stream(seed, &[label::TENSOR, p as u64]);
            let data: Vec<f64> = (0..len).map(|_| r.sample(StandardNormal)).collect();
            tensors.push(Tensor { p, data });
        }
        Ok(Hamiltonian { mixture: m.clone(), n, seed, tensors })
    }

    /// Build from explicit tensors, one per supported degree in ascending order.
    pub fn from_tensors(m: &Mixture, n: usize, seed: u64, tensors: Vec<Tensor>) -> Result<Self> {
        let degrees: Vec<u32> = m.support().map(|(p, _)| p).collect();
        let given: Vec<u32> = tensors.iter().map(|t| t.p).collect();
        if degrees != given {
            return arg(format!("tensor degrees {given:?} do not match mixture support {degrees:?}"));
        }
        for t in &tensors {
            if Some(t.data.len()) != tensor_len(n, t.p) {
                return arg(format!("tensor for p={} has {} entries, expected N^p", t.p, t.data.len()));
            }
        }
        Ok(Hamiltonian { mixture: m.clone(), n, seed, tensors })
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Disorder vector: all tensors concatenated in ascending `p`.
    pub fn coefficients(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn with_coefficients(&self, coeffs: &[f64]) -> Result<Self> {
        let total: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        if coeffs.len() != total {
            return arg(format!("expected {total} coefficients, got {}", coeffs.len()));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in &mut out.tensors {
            let len = t.data.len();
            t.data.copy_from_slice(&coeffs[off..off + len]);
            off += len;
        }
        Ok(out)
    }

    fn check_point(&self, x: &Point) -> Result<()> {
        check_eval_point(self.n, x)
    }

    fn scale(&self, p: u32) -> f64 {
        self.mixture.gammas[&p] * (self.n as f64).powf(-((p - 1) as f64) / 2.0)
    }

    /// `nabla^{k} H~(x)[., dirs...]` with `k = dirs.len() + 1`, field excluded.
    pub fn derivative_contract(&self, x: &[f64], dirs: &[&[f64]]) -> Vec<f64> {
        let n = self.n;
        let k = dirs.len() + 1;
        let mut out = vec![0.0; n];
        for t in &self.tensors {
            let p = t.p as usize;
            if p < k {
                continue;
            }
            let c = self.scale(t.p);
            if !dirs.is_empty() {
                let v = symmetric_contract(&t.data, n, p, x, dirs);
                for (o, vi) in out.iter_mut().zip(v) {
                    *o += c * vi;
                }
                continue;
            }
            let mut assign = vec![0usize; k];
            for_each_injection(p, k, &mut assign, 0, &mut |a: &[usize]| {
                let mut slots: Vec<Option<&[f64]>> = vec![Some(x); p];
                slots[a[0]] = None;
                for (i, d) in dirs.iter().enumerate() {
                    slots[a[i + 1]] = Some(d);
                }
                let v = contract(&t.data, n, &slots);
                for (o, vi) in out.iter_mut().zip(v) {
                    *o += c * vi;
                }
            });
        }
        out
    }

    /// Field-free energy `H~(x)` without domain checks.
    pub fn field_free_energy_raw(&self, x: &[f64]) -> f64 {
        let mut e = 0.0;
        for t in &self.tensors {
            let slots = vec![Some(x); t.p as usize];
            e += self.scale(t.p) * contract(&t.data, self.n, &slots)[0];
        }
        e
    }

    pub fn field_free_gradient(&self, x: &Point) -> Result<Point> {
        self.check_point(x)?;
        Ok(Point::from_vec(self.derivative_contract(x.as_slice(), &[])))
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.mixture.h.to_le_bytes())?;
        w.write_all(&(self.mixture.gammas.len() as u32).to_le_bytes())?;
        for (&p, &g) in &self.mixture.gammas {
            w.write_all(&p.to_le_bytes())?;
            w.write_all(&g.to_le_bytes())?;
        }
        for t in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Format("bad snapshot magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let h = f64::from_le_bytes(read_array(&mut r)?);
        let count = u32::from_le_bytes(read_array(&mut r)?);
        let mut gammas = Vec::new();
        for _ in 0..count {
            let p = u32::from_le_bytes(read_array(&mut r)?);
            let g = f64::from_le_bytes(read_array(&mut r)?);
            gammas.push((p, g));
        }
        let mixture = Mixture::new(&gammas, h).map_err(|e| Error::Format(e.to_string()))?;
        let mut tensors = Vec::new();
        for (p, _) in mixture.support() {
            let len = tensor_len(n, p).ok_or_else(|| Error::Format("tensor size overflow".into()))?;
            if len > DEFAULT_TENSOR_BUDGET {
                return Err(Error::Resource(format!("snapshot tensor p={p} exceeds budget")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            tensors.push(Tensor { p, data });
        }
        Ok(Hamiltonian { mixture, n, seed, tensors })
    }
}

fn read_array<R: Read, const K: usize>(r: &mut R) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn for_each_injection<F: FnMut(&[usize])>(p: usize, k: usize, cur: &mut [usize], depth: usize, f: &mut F) {
    if depth == k {
        f(cur);
        return;
    }
    for s in 0..p {
        if cur[..depth].contains(&s) {
            continue;
        }
        cur[depth] = s;
        for_each_injection(p, k, cur, depth + 1, f);
    }
}

/// Sum over every placement of `x` on `p - k` slots, each direction on one
/// slot and a free index on the last, built slot by slot. States are keyed by
/// (directions used, free index placed); each slot costs one partial
/// contraction per state and choice instead of one full pass per placement.
fn symmetric_contract(data: &[f64], n: usize, p: usize, x: &[f64], dirs: &[&[f64]]) -> Vec<f64> {
    let nd = dirs.len();
    let n_x = p - nd - 1;
    let keys = 2usize << nd;
    let mut states: Vec<Option<Cow<[f64]>>> = vec![None; keys];
    states[0] = Some(Cow::Borrowed(data));
    for r in (1..=p).rev() {
        let processed = p - r;
        let mut next: Vec<Option<Cow<[f64]>>> = vec![None; keys];
        for (key, st) in states.iter_mut().enumerate() {
            let Some(arr) = st.take() else { continue };
            let (mask, free) = (key >> 1, key & 1 == 1);
            let b = if free { n } else { 1 };
            let need = |m: usize, f: bool| nd - m.count_ones() as usize + usize::from(!f);
            let x_used = processed - mask.count_ones() as usize - usize::from(free);
            if x_used < n_x && need(mask, free) < r {
                accumulate(&mut next[key], contract_last(&arr, n, b, x));
            }
            for (i, d) in dirs.iter().enumerate() {
                let m2 = mask | (1 << i);
                if m2 != mask && need(m2, free) < r {
                    accumulate(&mut next[(m2 << 1) | usize::from(free)], contract_last(&arr, n, b, d));
                }
            }
            if !free && need(mask, true) < r {
                accumulate(&mut next[(mask << 1) | 1], arr);
            }
        }
        states = next;
    }
    states[keys - 1].take().map(Cow::into_owned).unwrap_or_else(|| vec![0.0; n])
}

fn accumulate<'a>(slot: &mut Option<Cow<'a, [f64]>>, v: Cow<'a, [f64]>) {
    match slot {
        None => *slot = Some(v),
        Some(acc) => {
            for (a, b) in acc.to_mut().iter_mut().zip(v.iter()) {
                *a += b;
            }
        }
    }
}

/// Contract the innermost non-free slot of an `(n^r, b)` array with `v`.
fn contract_last<'a>(src: &[f64], n: usize, b: usize, v: &[f64]) -> Cow<'a, [f64]> {
    let a = src.len() / (n * b);
    let mut out = vec![0.0; a * b];
    for i in 0..a {
        let dst = &mut out[i * b..(i + 1) * b];
        for (m, &vm) in v.iter().enumerate() {
            let row = &src[(i * n + m) * b..(i * n + m + 1) * b];
            for (d, r) in dst.iter_mut().zip(row) {
                *d += vm * r;
            }
        }
    }
    Cow::Owned(out)
}

/// Contract a raw order-`p` tensor (row-major, first slot slowest) with one
/// vector per slot. `None` slots stay free and appear in the output in order.
pub fn contract(data: &[f64], n: usize, slots: &[Option<&[f64]>]) -> Vec<f64> {
    let mut owned: Option<Vec<f64>> = None;
    let mut free_after = 0u32;
    for k in (0..slots.len()).rev() {
        let Some(v) = slots[k] else {
            free_after += 1;
            continue;
        };
        let src: &[f64] = owned.as_deref().unwrap_or(data);
        let b = n.pow(free_after);
        let a = src.len() / (n * b);
        let mut out = vec![0.0; a * b];
        if b == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &src[i * n..(i + 1) * n];
                *o = row.iter().zip(v).map(|(r, w)| r * w).sum();
            }
        } else {
            for i in 0..a {
                let dst = &mut out[i * b..(i + 1) * b];
                for (m, &vm) in v.iter().enumerate() {
                    let row = &src[(i * n + m) * b..(i * n + m + 1) * b];
                    for (d, r) in dst.iter_mut().zip(row) {
                        *d += vm * r;
                    }
                }
            }
        }
        owned = Some(out);
    }
    owned.unwrap_or_else(|| data.to_vec())
}

impl Landscape for Hamiltonian {
    fn dim(&self) -> usize {
        self.n
    }

    fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    fn energy(&self, x: &Point) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.mixture.h * x.sum() + self.field_free_energy_raw(x.as_slice()))
    }

    fn gradient(&self, x: &Point) -> Result<Point> {
        let mut g = self.field_free_gradient(x)?;
        g.add_scalar_mut(self.mixture.h);
        Ok(g)
    }

    fn hessian(&self, x: &Point) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let n = self.n;
        if n > DENSE_HESSIAN_CAP {
            return Err(Error::Resource(format!(
                "dense Hessian at N={n} exceeds cap {DENSE_HESSIAN_CAP}; use hessian_apply"
            )));
        }
        let mut hm = DMatrix::zeros(n, n);
        for t in &self.tensors {
            let p = t.p as usize;
            let c = self.scale(t.p);
            for s in 0..p {
                for u in s + 1..p {
                    let mut slots: Vec<Option<&[f64]>> = vec![Some(x.as_slice()); p];
                    slots[s] = None;
                    slots[u] = None;
                    let v = contract(&t.data, n, &slots);
                    // v is row-major with slot s as row index
                    let cm = DMatrix::from_row_slice(n, n, &v);
                    hm += (&cm + cm.transpose()) * c;
                }
            }
        }
        Ok(hm)
    }

    fn hessian_apply(&self, x: &Point, w: &Point) -> Result<Point> {
        self.check_point(x)?;
        if w.len() != self.n {
            return arg("direction has wrong dimension");
        }
        Ok(Point::from_vec(self.derivative_contract(x.as_slice(), &[w.as_slice()])))
    }
}

/// Top eigenpair of `nabla^2 H(x)` restricted to the span of an orthonormal basis.
///
/// Uses the Rayleigh–Ritz projection onto the span, which is exact for the
/// restricted form; the eigen-residual is checked afterwards.
pub fn restricted_top_eigvec<L: Landscape + ?Sized>(h: &L, x: &Point, basis: &[Point]) -> Result<(Point, f64)> {
    let k = basis.len();
    if k == 0 {
        return arg("basis is empty");
    }
    let n = h.dim();
    for (i, b) in basis.iter().enumerate() {
        if b.len() != n {
            return arg("basis vector has wrong dimension");
        }
        for (j, c) in basis.iter().enumerate().take(i + 1) {
            let target = if i == j { 1.0 } else { 0.0 };
            if (b.dot(c) - target).abs() > 1e-10 {
                return arg(format!("basis not orthonormal at ({i},{j})"));
            }
        }
    }
    let bm = DMatrix::from_columns(basis);
    let hb = if n <= DENSE_HESSIAN_CAP && k > 4 {
        h.hessian(x)? * &bm
    } else {
        let cols: Result<Vec<Point>> = basis.iter().map(|b| h.hessian_apply(x, b)).collect();
        DMatrix::from_columns(&cols?)
    };
    let mut s = bm.transpose() * &hb;
    s = (&s + s.transpose()) * 0.5;
    let (y, lambda) = top_eigenpair(&s);
    let resid = (&s * &y - &y * lambda).norm();
    if resid > 1e-8 * lambda.abs().max(1.0) {
        return Err(Error::Numeric(format!("restricted eigen-residual {resid:e} too large")));
    }
    Ok((&bm * y, lambda))
}

/// Largest eigenvalue and its unit eigenvector of a symmetric matrix.
pub fn top_eigenpair(s: &DMatrix<f64>) -> (DVector<f64>, f64) {
    let eig = SymmetricEigen::new(s.clone());
    let i = eig.eigenvalues.imax();
    (eig.eigenvectors.column(i).into_owned(), eig.eigenvalues[i])
}

/// Empirical lower estimate of `sup_{||x||_N <= r} ||nabla^k H(x)||_op`.
///
/// The operator norm of a k-tensor `A` is `max |A[s1,...,sk]| / N` over
/// `s_i` on `S_N`. Each trial draws its own stream, so the result is the
/// running maximum over a fixed sequence of trials.
pub fn op_norm_probe(h: &Hamiltonian, k: usize, r: f64, trials: usize, seed: u64) -> Result<f64> {
    if !(1..=3).contains(&k) {
        return arg(format!("derivative order k={k} must be 1, 2 or 3"));
    }
    if !(1.0..EVAL_RADIUS).contains(&r) {
        return arg(format!("radius r={r} must lie in [1, sqrt 2)"));
    }
    let n = h.n;
    let sn = (n as f64).sqrt();
    let nf = n as f64;
    let field = h.mixture.h;
    let apply = |x: &Point, others: &[&[f64]]| -> Point {
        let mut g = Point::from_vec(h.derivative_contract(x.as_slice(), others));
        if others.is_empty() {
            g.add_scalar_mut(field);
        }
        g
    };
    let mut best = 0.0f64;
    for t in 0..trials {
        let mut rg = rng::stream(seed, &[label::PROBE, t as u64]);
        let mut x = random_on_sphere(n, r, &mut rg);
        let mut sig: Vec<Point> = (0..k).map(|_| random_on_sphere(n, 1.0, &mut rg)).collect();
        let mut val = 0.0f64;
        for _round in 0..PROBE_ROUNDS {
            let before = val;
            for i in 0..k {
                let others: Vec<&[f64]> = (0..k).filter(|&j| j != i).map(|j| sig[j].as_slice()).collect();
                let g = apply(&x, &others);
                let gn = g.norm();
                if gn > 0.0 {
                    sig[i] = g * (sn / gn);
                    val = val.max(gn * sn / nf);
                }
            }
            let dirs: Vec<&[f64]> = sig.iter().map(|s| s.as_slice()).collect();
            let gx = Point::from_vec(h.derivative_contract(x.as_slice(), &dirs));
            let gxn = gx.norm();
            if gxn > 1e-14 * sn {
                let cand = gx * (r * sn / gxn);
                let others: Vec<&[f64]> = sig[1..].iter().map(|s| s.as_slice()).collect();
                let cur = apply(&cand, &others).dot(&sig[0]).abs() / nf;
                if cur > val {
                    val = cur;
                    x = cand;
                }
            }
            if val - before <= 1e-10 * val {
                break;
            }
        }
        best = best.max(val);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xi_examples() {
        let p4 = Mixture::pure(4, 0.0).unwrap();
        assert_eq!(xi_eval(&p4, 1.0, 0).unwrap(), 1.0);
        assert_eq!(xi_eval(&p4, 1.0, 2).unwrap(), 12.0);
        let m = Mixture::new(&[(2, 1.0), (4, 1.0)], 0.0).unwrap();
        assert_eq!(xi_eval(&m, 0.5, 1).unwrap(), 1.5);
        assert!(matches!(xi_eval(&m, 0.5, 5), Err(Error::Argument(_))));
    }

    #[test]
    fn mixture_rejects_odd_and_negative() {
        assert!(Mixture::new(&[(3, 1.0)], 0.0).is_err());
        assert!(Mixture::new(&[(2, -1.0)], 0.0).is_err());
        assert!(Mixture::new(&[], 0.0).is_err());
    }

    #[test]
    fn contract_matches_naive_order3() {
        let n = 3;
        let data: Vec<f64> = (0..27).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x = [0.3, -0.2, 0.5];
        let y = [1.0, 2.0, -1.0];
        let v = contract(&data, n, &[Some(&x), None, Some(&y)]);
        for j in 0..n {
            let mut s = 0.0;
            for a in 0..n {
                for c in 0..n {
                    s += data[(a * n + j) * n + c] * x[a] * y[c];
                }
            }
            assert!((v[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn staged_contraction_matches_placement_sum() {
        let n: usize = 3;
        for p in [2usize, 4, 5] {
            let data: Vec<f64> = (0..n.pow(p as u32)).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
            let x = [0.3, -0.7, 0.5];
            let d1 = [1.0, 0.2, -0.4];
            let d2 = [-0.6, 0.9, 0.1];
            for dirs in [vec![&d1[..]], vec![&d1[..], &d2[..]]] {
                if dirs.len() + 1 > p {
                    continue;
                }
                let k = dirs.len() + 1;
                let mut naive = vec![0.0; n];
                let mut assign = vec![0usize; k];
                for_each_injection(p, k, &mut assign, 0, &mut |a: &[usize]| {
                    let mut slots: Vec<Option<&[f64]>> = vec![Some(&x[..]); p];
                    slots[a[0]] = None;
                    for (i, d) in dirs.iter().enumerate() {
                        slots[a[i + 1]] = Some(d);
                    }
                    for (o, v) in naive.iter_mut().zip(contract(&data, n, &slots)) {
                        *o += v;
                    }
                });
                let fast = symmetric_contract(&data, n, p, &x, &dirs);
                for (a, b) in fast.iter().zip(&naive) {
                    assert!((a - b).abs() < 1e-12, "p={p}, k={k}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn hand_set_quadratic_energy() {
        let m = Mixture::pure(2, 0.0).unwrap();
        let h = Hamiltonian::from_tensors(&m, 2, 0, vec![Tensor { p: 2, data: vec![1.0, 2.0, 3.0, 4.0] }]).unwrap();
        let x = Point::from_vec(vec![2f64.sqrt(), 0.0]);
        assert!((h.energy(&x).unwrap() - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn radius_guard() {
        let m = Mixture::pure(2, 0.0).unwrap();
        let h = sample_hamiltonian(&m, 4, 1).unwrap();
        let x = Point::from_element(4, 1.5);
        assert!(matches!(h.energy(&x), Err(Error::Domain(_))));
    }
}
