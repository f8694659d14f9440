//! Ascent algorithms on a fixed landscape. Every optimizer here maximizes `H`.

use crate::core_model::{norm_sq_n, overlap, Hamiltonian, Landscape, Mixture, Point, EVAL_RADIUS};
use crate::ensembles::{CorrelatedEnsemble, OverlapLadder};
use crate::error::{arg, Error, Result};
use crate::rng::{self, label, Rng};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

/// Samples used for every state-evolution expectation.
pub const SE_SAMPLES: usize = 100_000;
const SE_SEED: u64 = 0x5e5e_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Region {
    /// `||x||_N <= r`.
    Ball(f64),
    /// `|x_i| <= r`.
    Cube(f64),
    /// No constraint (AMP iterates).
    Free,
}

impl Region {
    fn validate(&self) -> Result<()> {
        match *self {
            Region::Ball(r) | Region::Cube(r) if !(r > 0.0 && r <= EVAL_RADIUS) => {
                arg(format!("region radius {r} must lie in (0, sqrt 2]"))
            }
            _ => Ok(()),
        }
    }

    /// Projection and whether it moved the point.
    pub fn project(&self, x: Point) -> (Point, bool) {
        match *self {
            Region::Ball(r) => {
                let nn = norm_sq_n(&x).sqrt();
                if nn > r {
                    (x * (r / nn), true)
                } else {
                    (x, false)
                }
            }
            Region::Cube(r) => {
                let hit = x.iter().any(|v| v.abs() > r);
                (x.map(|v| v.clamp(-r, r)), hit)
            }
            Region::Free => (x, false),
        }
    }

    pub fn contains(&self, x: &Point, tol: f64) -> bool {
        match *self {
            Region::Ball(r) => norm_sq_n(x).sqrt() <= r + tol,
            Region::Cube(r) => x.iter().all(|v| v.abs() <= r + tol),
            Region::Free => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub algorithm: String,
    pub params: Value,
    pub seed: Option<u64>,
    /// Index of `iterates[0]`; negative for pre-history `x^{-T0}`.
    pub first_step: i64,
    pub iterates: Vec<Point>,
    pub energies: Vec<f64>,
    pub region: Region,
    /// The algorithm's output; the last iterate unless a final map is applied.
    pub output: Point,
    pub boundary_hits: usize,
    pub notes: Vec<String>,
}

impl Trajectory {
    fn new(algorithm: &str, params: Value, seed: Option<u64>, first_step: i64, iterates: Vec<Point>, energies: Vec<f64>, region: Region) -> Self {
        let output = iterates.last().cloned().unwrap_or_else(|| Point::zeros(0));
        Trajectory { algorithm: algorithm.into(), params, seed, first_step, iterates, energies, region, output, boundary_hits: 0, notes: Vec::new() }
    }

    pub fn final_energy(&self) -> f64 {
        *self.energies.last().unwrap_or(&f64::NAN)
    }

    pub fn final_energy_per_n(&self) -> f64 {
        self.final_energy() / self.output.len().max(1) as f64
    }

    /// Largest gap between stored and recomputed energies; errors if an iterate
    /// leaves the declared region.
    pub fn energy_mismatch(&self, energy: &dyn Fn(&Point) -> Result<f64>) -> Result<f64> {
        let mut worst = 0.0f64;
        for (k, (x, e)) in self.iterates.iter().zip(&self.energies).enumerate() {
            if !self.region.contains(x, 1e-12) {
                return Err(Error::Domain(format!("iterate {k} leaves {:?}", self.region)));
            }
            worst = worst.max((energy(x)? - e).abs());
        }
        Ok(worst)
    }

    pub fn metadata(&self) -> Value {
        json!({ "algorithm": self.algorithm, "params": self.params, "seed": self.seed })
    }

    pub fn summary(&self) -> Value {
        json!({
            "algorithm": self.algorithm,
            "params": self.params,
            "seed": self.seed,
            "steps": self.iterates.len(),
            "final_energy_per_n": self.final_energy_per_n(),
            "final_norm_sq": norm_sq_n(&self.output),
            "boundary_hits": self.boundary_hits,
            "notes": self.notes,
        })
    }

    /// CSV with a JSON header comment; the overlap column appears when an anchor is given.
    pub fn to_csv(&self, anchor: Option<&Point>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.metadata());
        s.push_str(if anchor.is_some() { "step,energy,norm2,overlap\n" } else { "step,energy,norm2\n" });
        for (k, (x, e)) in self.iterates.iter().zip(&self.energies).enumerate() {
            let _ = write!(s, "{},{:?},{:?}", self.first_step + k as i64, e, norm_sq_n(x));
            if let Some(a) = anchor {
                let _ = write!(s, ",{:?}", overlap(x, a));
            }
            s.push('\n');
        }
        s
    }
}

/// Generic iteration `x^{t+1} = f_t(x^{-T0}, ..., x^t)`; `f` sees the full
/// history and queries the landscape itself. Returns iterates and energies.
pub fn run_opt_form<L, F>(h: &L, history: Vec<Point>, steps: usize, mut f: F) -> Result<(Vec<Point>, Vec<f64>)>
where
    L: Landscape + ?Sized,
    F: FnMut(usize, &[Point]) -> Result<Point>,
{
    if history.is_empty() {
        return arg("opt-form iteration needs at least one initial point");
    }
    let mut xs = history;
    for t in 0..steps {
        let next = f(t, &xs)?;
        xs.push(next);
    }
    let es = xs.iter().map(|x| h.energy(x)).collect::<Result<Vec<_>>>()?;
    Ok((xs, es))
}

/// One projected ascent step `Pi(x + lr grad H(x))`.
pub fn ascent_step<L: Landscape + ?Sized>(h: &L, x: &Point, lr: f64, region: Region) -> Result<(Point, bool)> {
    let g = h.gradient(x)?;
    Ok(region.project(x + g * lr))
}

fn lr_at(lr: &[f64], t: usize) -> f64 {
    if lr.len() == 1 {
        lr[0]
    } else {
        lr[t]
    }
}

pub fn gradient_ascent<L: Landscape + ?Sized>(h: &L, x0: &Point, steps: usize, lr: &[f64], region: Region) -> Result<Trajectory> {
    region.validate()?;
    if matches!(region, Region::Free) {
        return arg("gradient ascent needs a ball or cube region");
    }
    if lr.is_empty() || (lr.len() != 1 && lr.len() < steps) {
        return arg(format!("need one learning rate or at least {steps}, got {}", lr.len()));
    }
    if lr.iter().any(|v| !v.is_finite()) {
        return arg("learning rates must be finite");
    }
    if x0.len() != h.dim() || !region.contains(x0, 1e-12) {
        return arg(format!("initial point is not in {region:?}"));
    }
    let mut xs = vec![x0.clone()];
    let mut es = vec![h.energy(x0)?];
    let mut hits = 0;
    for t in 0..steps {
        let (next, hit) = ascent_step(h, &xs[t], lr_at(lr, t), region)?;
        hits += hit as usize;
        es.push(h.energy(&next)?);
        xs.push(next);
    }
    let params = json!({ "steps": steps, "lr": lr, "region": format!("{region:?}") });
    let mut tr = Trajectory::new("gradient_ascent", params, None, 0, xs, es, region);
    tr.boundary_hits = hits;
    Ok(tr)
}

// ---------------------------------------------------------------- AMP

/// Piecewise-linear scalar map, extended linearly past the end knots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiecewiseLinear {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return arg("piecewise-linear map needs matching, nonempty knots and values");
        }
        if knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return arg("piecewise-linear map has non-finite entries");
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return arg("knots must be strictly increasing (a repeated knot is a jump, not Lipschitz)");
        }
        Ok(PiecewiseLinear { knots, values })
    }

    pub fn identity() -> Self {
        PiecewiseLinear { knots: vec![0.0, 1.0], values: vec![0.0, 1.0] }
    }

    pub fn constant(c: f64) -> Self {
        PiecewiseLinear { knots: vec![0.0], values: vec![c] }
    }

    fn slope(&self, i: usize) -> f64 {
        (self.values[i + 1] - self.values[i]) / (self.knots[i + 1] - self.knots[i])
    }

    fn segment(&self, x: f64) -> usize {
        let k = &self.knots;
        k.partition_point(|&v| v <= x).saturating_sub(1).min(k.len() - 2)
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.knots.len() == 1 {
            return self.values[0];
        }
        let i = self.segment(x);
        self.values[i] + self.slope(i) * (x - self.knots[i])
    }

    /// Right derivative.
    pub fn deriv(&self, x: f64) -> f64 {
        if self.knots.len() == 1 {
            return 0.0;
        }
        self.slope(self.segment(x))
    }

    pub fn lipschitz(&self) -> f64 {
        (0..self.knots.len().saturating_sub(1)).map(|i| self.slope(i).abs()).fold(0.0, f64::max)
    }
}

/// `f_t(x^0, ..., x^t) = rho(sum_s coeffs[s] x^s)`, entrywise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Nonlinearity {
    pub coeffs: Vec<f64>,
    pub rho: PiecewiseLinear,
}

impl Nonlinearity {
    fn arg(&self, xs: &[f64]) -> f64 {
        self.coeffs.iter().zip(xs).map(|(c, x)| c * x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum InitialLaw {
    Constant(f64),
    Rademacher,
    Uniform(f64, f64),
}

impl InitialLaw {
    fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            InitialLaw::Constant(c) => c,
            InitialLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            InitialLaw::Uniform(a, b) => a + (b - a) * rng.random::<f64>(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StateEvolution {
    /// `q[(t-1, s-1)] = Q_{t,s}` for `1 <= s, t <= T`.
    pub q: DMatrix<f64>,
    /// `ff[(t, s)] = E[f_t f_s]`.
    pub ff: DMatrix<f64>,
    /// `df[(t, s)] = E[d f_t / d X^s]`.
    pub df: DMatrix<f64>,
}

impl StateEvolution {
    pub fn q_ts(&self, t: usize, s: usize) -> f64 {
        self.q[(t - 1, s - 1)]
    }
}

#[derive(Debug)]
pub struct AmpSpec {
    f: Vec<Nonlinearity>,
    init: InitialLaw,
    lipschitz: Vec<f64>,
    cache: Mutex<Vec<(Mixture, Arc<StateEvolution>)>>,
}

impl AmpSpec {
    /// `f[t]` must take `t + 1` arguments; the horizon is `f.len()`.
    pub fn new(f: Vec<Nonlinearity>, init: InitialLaw) -> Result<Self> {
        if f.is_empty() {
            return arg("AMP needs at least one nonlinearity");
        }
        for (t, ft) in f.iter().enumerate() {
            if ft.coeffs.len() != t + 1 || ft.coeffs.iter().any(|c| !c.is_finite()) {
                return arg(format!("f_{t} needs {} finite coefficients", t + 1));
            }
        }
        if let InitialLaw::Uniform(a, b) = init {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return arg("uniform initial law needs finite a <= b");
            }
        }
        if let InitialLaw::Constant(c) = init {
            if !c.is_finite() {
                return arg("constant initial law must be finite");
            }
        }
        let lipschitz = f.iter().map(|ft| ft.rho.lipschitz() * ft.coeffs.iter().map(|c| c.abs()).sum::<f64>()).collect();
        Ok(AmpSpec { f, init, lipschitz, cache: Mutex::new(Vec::new()) })
    }

    pub fn horizon(&self) -> usize {
        self.f.len()
    }

    pub fn lipschitz(&self) -> &[f64] {
        &self.lipschitz
    }

    pub fn nonlinearities(&self) -> &[Nonlinearity] {
        &self.f
    }

    pub fn init(&self) -> InitialLaw {
        self.init
    }
}

/// Covariances `Q_{t,s}` and the expectations entering the Onsager terms,
/// by Monte Carlo over `SE_SAMPLES` draws; cached per (spec, mixture).
pub fn state_evolution(spec: &AmpSpec, m: &Mixture) -> Arc<StateEvolution> {
    if let Some((_, se)) = spec.cache.lock().unwrap().iter().find(|(mm, _)| mm == m) {
        return se.clone();
    }
    let tt = spec.horizon();
    let n = SE_SAMPLES;
    let mut rx = rng::stream(SE_SEED, &[label::INIT]);
    let mut rz = rng::stream(SE_SEED, &[label::MC]);
    // xs[s][k]: sample k of X^s
    let mut xs: Vec<Vec<f64>> = vec![(0..n).map(|_| spec.init.sample(&mut rx)).collect()];
    let z: Vec<Vec<f64>> = (0..tt).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rz)).collect()).collect();
    let mut q = DMatrix::zeros(tt, tt);
    let mut chol = DMatrix::<f64>::zeros(tt, tt);
    let mut ff = DMatrix::zeros(tt, tt);
    let mut df = DMatrix::zeros(tt, tt + 1);
    let mut fv: Vec<Vec<f64>> = Vec::new();
    let mut row = vec![0.0; tt + 1];
    for t in 0..tt {
        let ft = &spec.f[t];
        let mut vals = vec![0.0; n];
        let mut dsum = vec![0.0; t + 1];
        for k in 0..n {
            for s in 0..=t {
                row[s] = xs[s][k];
            }
            let a = ft.arg(&row[..=t]);
            vals[k] = ft.rho.eval(a);
            let d = ft.rho.deriv(a);
            for s in 0..=t {
                dsum[s] += d * ft.coeffs[s];
            }
        }
        for s in 0..=t {
            df[(t, s)] = dsum[s] / n as f64;
        }
        fv.push(vals);
        for s in 0..=t {
            let e = fv[t].iter().zip(&fv[s]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            ff[(t, s)] = e;
            ff[(s, t)] = e;
        }
        // Q_{t+1, s+1} = xi'(E f_t f_s)
        for s in 0..=t {
            let v = m.xi1(ff[(t, s)]);
            q[(t, s)] = v;
            q[(s, t)] = v;
        }
        if t + 1 < tt {
            // extend the lower Cholesky factor by one row
            for j in 0..=t {
                let dot: f64 = (0..j).map(|k| chol[(t, k)] * chol[(j, k)]).sum();
                if j == t {
                    chol[(t, t)] = (q[(t, t)] - dot).max(0.0).sqrt();
                } else if chol[(j, j)] > 1e-300 {
                    chol[(t, j)] = (q[(t, j)] - dot) / chol[(j, j)];
                }
            }
            let new: Vec<f64> = (0..n).map(|k| (0..=t).map(|j| chol[(t, j)] * z[j][k]).sum()).collect();
            xs.push(new);
        }
    }
    let se = Arc::new(StateEvolution { q, ff, df });
    spec.cache.lock().unwrap().push((m.clone(), se.clone()));
    se
}

#[derive(Debug, Clone)]
pub struct AmpRun {
    /// Iterates `x^0, ..., x^T` with energies `H(x^t)` evaluated without a radius check.
    pub trajectory: Trajectory,
    /// `f_t(x^0, ..., x^t)` for `t < T`.
    pub outputs: Vec<Point>,
    /// Empirical `R(x^t, x^s)`.
    pub overlaps: DMatrix<f64>,
    pub onsager: DMatrix<f64>,
    pub se: Arc<StateEvolution>,
}

/// Energy `h sum(x) + H~(x)` with no evaluation-radius check.
pub fn energy_unchecked(h: &Hamiltonian, x: &Point) -> f64 {
    h.mixture().h() * x.sum() + h.field_free_energy_raw(x.as_slice())
}

pub fn amp(h: &Hamiltonian, spec: &AmpSpec, seed: u64) -> Result<AmpRun> {
    let n = h.n();
    let tt = spec.horizon();
    let se = state_evolution(spec, h.mixture());
    let mut rx = rng::stream(seed, &[label::INIT]);
    let x0 = Point::from_fn(n, |_, _| spec.init.sample(&mut rx));
    let mut xs = vec![x0];
    let mut fs: Vec<Point> = Vec::new();
    let mut d = DMatrix::zeros(tt, tt + 1);
    let mut row = vec![0.0; tt + 1];
    for t in 0..tt {
        let ft = &spec.f[t];
        let f = Point::from_fn(n, |i, _| {
            let mut r = row.clone();
            for s in 0..=t {
                r[s] = xs[s][i];
            }
            ft.rho.eval(ft.arg(&r[..=t]))
        });
        let mut next = Point::from_vec(h.derivative_contract(f.as_slice(), &[]));
        for s in 1..=t {
            let dts = h.mixture().xi2(overlap(&f, &fs[s - 1])) * se.df[(t, s)];
            d[(t, s)] = dts;
            next.axpy(-dts, &fs[s - 1], 1.0);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("AMP iterate {} is not finite", t + 1)));
        }
        fs.push(f);
        xs.push(next);
        row.iter_mut().for_each(|v| *v = 0.0);
    }
    let overlaps = DMatrix::from_fn(tt + 1, tt + 1, |a, b| overlap(&xs[a], &xs[b]));
    let es = xs.iter().map(|x| energy_unchecked(h, x)).collect();
    let params = json!({ "horizon": tt, "init": spec.init, "lipschitz": spec.lipschitz });
    let trajectory = Trajectory::new("amp", params, Some(seed), 0, xs, es, Region::Free);
    Ok(AmpRun { trajectory, outputs: fs, overlaps, onsager: d, se })
}

// ---------------------------------------------------------------- Subag

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SubagMode {
    TopEig,
    RandomSubspace,
}

/// Symmetric eigendecomposition of the Hessian restricted to `x^perp`
/// (full space when `x = 0`), returned with the basis it is expressed in.
fn perp_hessian<L: Landscape + ?Sized>(h: &L, x: &Point) -> Result<(DMatrix<f64>, SymmetricEigen<f64, nalgebra::Dyn>)> {
    let n = h.dim();
    let hm = h.hessian(x)?;
    let xn = x.norm();
    if xn == 0.0 {
        let eig = SymmetricEigen::new(hm);
        return Ok((DMatrix::identity(n, n), eig));
    }
    // Householder reflector sending x/|x| to a multiple of e_0; its other columns span x^perp.
    let mut v = x / xn;
    v[0] += if v[0] >= 0.0 { 1.0 } else { -1.0 };
    let vv = v.norm_squared();
    let refl = DMatrix::identity(n, n) - &v * v.transpose() * (2.0 / vv);
    let basis = refl.columns(1, n - 1).into_owned();
    let mut s = basis.transpose() * hm * &basis;
    s = (&s + s.transpose()) * 0.5;
    Ok((basis, SymmetricEigen::new(s)))
}

fn sorted_desc(vals: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    idx
}

/// Unit direction in `x^perp` for the next step, sign fixed by the gradient.
pub fn subag_direction<L: Landscape + ?Sized>(h: &L, x: &Point, mode: SubagMode, k: usize, rng: &mut Rng) -> Result<Point> {
    let (basis, eig) = perp_hessian(h, x)?;
    let order = sorted_desc(&eig.eigenvalues);
    let y = match mode {
        SubagMode::TopEig => eig.eigenvectors.column(order[0]).into_owned(),
        SubagMode::RandomSubspace => {
            let k = k.min(order.len()).max(1);
            let mut y = DVector::zeros(order.len());
            for &i in &order[..k] {
                let c: f64 = StandardNormal.sample(rng);
                y.axpy(c, &eig.eigenvectors.column(i), 1.0);
            }
            y
        }
    };
    let mut v = &basis * y;
    let xn2 = x.norm_squared();
    if xn2 > 0.0 {
        let c = v.dot(x) / xn2;
        v.axpy(-c, x, 1.0);
    }
    let vn = v.norm();
    if !(vn > 0.0) {
        return Err(Error::Numeric("degenerate Subag direction".into()));
    }
    v /= vn;
    if h.gradient(x)?.dot(&v) < 0.0 {
        v = -v;
    }
    Ok(v)
}

/// `x^{i+1} = x^i + v sqrt(delta N)`.
pub fn subag_step<L: Landscape + ?Sized>(h: &L, x: &Point, delta: f64, mode: SubagMode, rng: &mut Rng) -> Result<Point> {
    let n = h.dim();
    let k = (delta * n as f64).floor() as usize;
    let v = subag_direction(h, x, mode, k, rng)?;
    Ok(x + v * (delta * n as f64).sqrt())
}

pub fn subag_steps(delta: f64) -> Result<usize> {
    if !(delta > 0.0 && delta <= 1.0) {
        return arg(format!("delta = {delta} must lie in (0, 1]"));
    }
    let m = (1.0 / delta).round();
    if (m * delta - 1.0).abs() > 1e-9 {
        return arg(format!("1/delta = {} is not an integer", 1.0 / delta));
    }
    Ok(m as usize)
}

/// Default `x^1`: the top Hessian eigenvector at the origin, scaled to `||x||_N^2 = delta`.
pub fn subag_ascent<L: Landscape + ?Sized>(h: &L, delta: f64, mode: SubagMode, seed: u64, x1: Option<&Point>) -> Result<Trajectory> {
    let m = subag_steps(delta)?;
    let n = h.dim();
    if delta * (n as f64) < 2.0 {
        return arg(format!("delta N = {} must be at least 2", delta * n as f64));
    }
    let mut rng = rng::stream(seed, &[label::STEP]);
    let x1 = match x1 {
        Some(x) => {
            if x.len() != n || (norm_sq_n(x) - delta).abs() > 1e-10 {
                return arg("x^1 must have ||x||_N^2 = delta");
            }
            x.clone()
        }
        None => subag_step(h, &Point::zeros(n), delta, SubagMode::TopEig, &mut rng)?,
    };
    let mut xs = vec![x1];
    for i in 1..m {
        let next = subag_step(h, &xs[i - 1], delta, mode, &mut rng)?;
        xs.push(next);
    }
    let es = xs.iter().map(|x| h.energy(x)).collect::<Result<Vec<_>>>()?;
    let params = json!({ "delta": delta, "mode": mode });
    Ok(Trajectory::new("subag", params, Some(seed), 1, xs, es, Region::Ball(1.0)))
}

// ---------------------------------------------------------------- Langevin

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LangevinConfig {
    pub beta: f64,
    pub horizon: f64,
    pub dt: f64,
    pub region: Region,
    pub seed: u64,
    /// Drop the Brownian term (deterministic drift only).
    pub noiseless: bool,
}

/// Brownian values at `k dt`, `k = 0..=steps`, built by dyadic midpoint
/// refinement when `steps` is a power of two so that halving `dt` refines
/// the same path; plain increments otherwise.
fn brownian_path(n: usize, steps: usize, dt: f64, seed: u64) -> Vec<Point> {
    let normal = |labels: &[u64]| -> Point {
        let mut r = rng::stream(seed, labels);
        Point::from_fn(n, |_, _| StandardNormal.sample(&mut r))
    };
    if !steps.is_power_of_two() {
        let mut w = vec![Point::zeros(n)];
        for k in 0..steps {
            let inc = normal(&[label::STEP, k as u64]) * dt.sqrt();
            w.push(&w[k] + inc);
        }
        return w;
    }
    let horizon = dt * steps as f64;
    let mut w = vec![Point::zeros(n); steps + 1];
    w[steps] = normal(&[label::STEP, 0, 0]) * horizon.sqrt();
    let mut span = steps;
    let mut level = 1u64;
    while span > 1 {
        let half = span / 2;
        let sd = (horizon * half as f64 / steps as f64 / 2.0).sqrt();
        for (j, a) in (0..steps).step_by(span).enumerate() {
            let mid = (&w[a] + &w[a + span]) * 0.5 + normal(&[label::STEP, level, j as u64]) * sd;
            w[a + half] = mid;
        }
        span = half;
        level += 1;
    }
    w
}

/// Euler–Maruyama for `dX = (beta/2) grad H dt + dB` from the origin, with a
/// projection after each step in place of the reflection; the output is the
/// final point projected onto the unit ball or cube.
pub fn langevin<L: Landscape + ?Sized>(h: &L, cfg: &LangevinConfig) -> Result<Trajectory> {
    if !(cfg.dt > 0.0 && cfg.dt <= 1e-2) {
        return arg(format!("dt = {} must lie in (0, 0.01]", cfg.dt));
    }
    if !(cfg.horizon > 0.0 && cfg.beta >= 0.0 && cfg.beta.is_finite()) {
        return arg("need horizon > 0 and finite beta >= 0");
    }
    let r = match cfg.region {
        Region::Ball(r) | Region::Cube(r) => r,
        Region::Free => return arg("Langevin needs a ball or cube region"),
    };
    if !(1.0..EVAL_RADIUS).contains(&r) {
        return arg(format!("radius {r} must lie in [1, sqrt 2)"));
    }
    let steps = (cfg.horizon / cfg.dt - 1e-9).ceil() as usize;
    let n = h.dim();
    let w = if cfg.noiseless { Vec::new() } else { brownian_path(n, steps, cfg.dt, cfg.seed) };
    let lr = cfg.beta * cfg.dt / 2.0;
    let mut xs = vec![Point::zeros(n)];
    let mut es = vec![h.energy(&xs[0])?];
    let mut hits = 0;
    for k in 0..steps {
        let g = h.gradient(&xs[k])?;
        let mut y = &xs[k] + g * lr;
        if !cfg.noiseless {
            y += &w[k + 1] - &w[k];
        }
        let (next, hit) = cfg.region.project(y);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("Langevin iterate {k} is not finite; reduce dt")));
        }
        hits += hit as usize;
        let e = h.energy(&next)?;
        if !e.is_finite() {
            return Err(Error::Numeric(format!("energy at step {k} is not finite; reduce dt")));
        }
        es.push(e);
        xs.push(next);
    }
    let unit = match cfg.region {
        Region::Cube(_) => Region::Cube(1.0),
        _ => Region::Ball(1.0),
    };
    let params = serde_json::to_value(cfg).unwrap_or(Value::Null);
    let mut tr = Trajectory::new("langevin", params, Some(cfg.seed), 0, xs, es, cfg.region);
    tr.output = unit.project(tr.output).0;
    tr.boundary_hits = hits;
    Ok(tr)
}

// ---------------------------------------------------------------- extension and rounding

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExtendMode {
    Spherical,
    Ising,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExtendConfig {
    pub mode: ExtendMode,
    /// Depth of the vertices the partial points sit at.
    pub start_depth: usize,
    /// Squared-norm length of each growth step (spherical), or the gap
    /// below 1 left for rounding (Ising).
    pub step: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Extension {
    /// Leaf points before rounding (equal to `sigmas` in spherical mode).
    pub points: Vec<Point>,
    pub sigmas: Vec<Point>,
    /// Per-leaf `(H^u(sigma(u)) - H^u(start)) / N`.
    pub energy_change: Vec<f64>,
    pub increments: usize,
    /// Set when random coordinate moves were used in place of a Hessian certificate.
    pub fallback: Option<String>,
}

/// Independent coordinatewise rounding with `E[sigma] = x`.
pub fn round_ising(x: &Point, rng: &mut Rng) -> Point {
    x.map(|v| if rng.random::<f64>() < (1.0 + v.clamp(-1.0, 1.0)) / 2.0 { 1.0 } else { -1.0 })
}

struct OrthoPool {
    basis: Vec<Point>,
    n: usize,
}

impl OrthoPool {
    fn push(&mut self, v: &Point) -> Option<Point> {
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &self.basis {
                let c = w.dot(b);
                w.axpy(-c, b, 1.0);
            }
        }
        let nw = w.norm();
        if nw < 1e-8 * v.norm().max(1e-300) {
            return None;
        }
        w /= nw;
        self.basis.push(w.clone());
        Some(w)
    }

    fn random(&mut self, rng: &mut Rng) -> Result<Point> {
        if self.basis.len() >= self.n {
            return Err(Error::Resource(format!("no orthogonal directions left in dimension {}", self.n)));
        }
        for _ in 0..8 {
            let g = Point::from_fn(self.n, |_, _| StandardNormal.sample(rng));
            if let Some(w) = self.push(&g) {
                return Ok(w);
            }
        }
        Err(Error::Numeric("could not draw an orthogonal direction".into()))
    }
}

fn grow_sphere(x: &Point, target: f64, step: f64, pool: &mut OrthoPool, rng: &mut Rng) -> Result<(Point, usize)> {
    let n = x.len() as f64;
    let gap = target - norm_sq_n(x);
    if gap <= 0.0 {
        return Ok((x.clone(), 0));
    }
    let k = (gap / step - 1e-9).ceil().max(1.0) as usize;
    let len = (gap / k as f64 * n).sqrt();
    let mut y = x.clone();
    for _ in 0..k {
        let v = pool.random(rng)?;
        y.axpy(len, &v, 1.0);
    }
    Ok((y, k))
}

/// Moves toward the cube boundary along random signs on unsaturated coordinates
/// until `||y||_N^2 = target`.
fn grow_cube(x: &Point, target: f64, rng: &mut Rng) -> Result<(Point, usize)> {
    let n = x.len() as f64;
    let mut y = x.clone();
    for it in 0..500 {
        let a = norm_sq_n(&y);
        if a >= target - 1e-15 {
            return Ok((y, it));
        }
        let w = y.map(|v| if rng.random::<bool>() { 1.0 - v.abs() } else { v.abs() - 1.0 });
        let b = y.dot(&w) / n;
        let c = w.norm_squared() / n;
        let tau = ((-b + (b * b - c * (a - target)).sqrt()) / c).min(1.0);
        y.axpy(tau, &w, 1.0);
        y.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    Err(Error::Numeric(format!("cube growth did not reach squared norm {target}")))
}

/// Grows partial points at `start_depth` to all leaves of the ensemble's tree
/// with pairwise overlaps following `q`. Spherical increments are orthogonal to
/// every previous increment, the partial points and `m`, so leaf overlaps are
/// exactly `q_{u^v}`. Ising mode moves on unsaturated coordinates with
/// independent signs per branch and rounds at the end.
pub fn extend_to_sphere(
    ens: &CorrelatedEnsemble,
    q: &OverlapLadder,
    partial: &[Point],
    m: &Point,
    cfg: &ExtendConfig,
) -> Result<Extension> {
    let shape = ens.shape();
    let n = ens.n();
    let dd = shape.depth();
    if q.depth() != dd {
        return arg("overlap ladder depth does not match the tree");
    }
    if cfg.start_depth > dd || partial.len() != shape.width(cfg.start_depth) {
        return arg(format!(
            "expected {} partial points at depth {}",
            shape.width(cfg.start_depth.min(dd)),
            cfg.start_depth
        ));
    }
    if !(cfg.step > 0.0 && cfg.step < 1.0) || m.len() != n {
        return arg("need step in (0, 1) and a centre of dimension N");
    }
    let qs = q.qs();
    let d0 = cfg.start_depth;
    for x in partial {
        if x.len() != n {
            return arg("partial point has wrong dimension");
        }
        match cfg.mode {
            ExtendMode::Spherical if norm_sq_n(x) > qs[d0] + 1e-12 => {
                return arg(format!("partial point has squared norm above q_{d0} = {}", qs[d0]));
            }
            ExtendMode::Ising if x.iter().any(|v| v.abs() > 1.0) => return arg("partial point is outside the cube"),
            _ => {}
        }
    }
    let mut rng = rng::stream(cfg.seed, &[label::STEP]);
    let mut pool = OrthoPool { basis: Vec::new(), n };
    let mut increments = 0;
    if cfg.mode == ExtendMode::Spherical {
        for x in partial.iter().chain(std::iter::once(m)) {
            if x.norm() > 0.0 {
                pool.push(x);
            }
        }
    }
    let leaf_target = |d: usize| match cfg.mode {
        ExtendMode::Ising if qs[d] >= 1.0 => 1.0 - cfg.step,
        _ => qs[d],
    };
    let grow = |x: &Point, d: usize, pool: &mut OrthoPool, rng: &mut Rng| match cfg.mode {
        ExtendMode::Spherical => grow_sphere(x, leaf_target(d), cfg.step, pool, rng),
        ExtendMode::Ising => grow_cube(x, leaf_target(d), rng),
    };
    let mut level: Vec<Point> = Vec::with_capacity(partial.len());
    for x in partial {
        let (y, k) = grow(x, d0, &mut pool, &mut rng)?;
        increments += k;
        level.push(y);
    }
    for d in d0 + 1..=dd {
        let kd = shape.ks()[d - 1];
        let mut next = Vec::with_capacity(level.len() * kd);
        for parent in &level {
            for _ in 0..kd {
                let (y, k) = grow(parent, d, &mut pool, &mut rng)?;
                increments += k;
                next.push(y);
            }
        }
        level = next;
    }
    let (sigmas, fallback) = match cfg.mode {
        ExtendMode::Spherical => (level.clone(), None),
        ExtendMode::Ising => {
            let mut rr = rng::stream(cfg.seed, &[label::ROUND]);
            let s = level.iter().map(|x| round_ising(x, &mut rr)).collect();
            (s, Some("random coordinate moves; no Hessian certificate at finite N".to_string()))
        }
    };
    let nf = n as f64;
    let mut energy_change = Vec::with_capacity(sigmas.len());
    for (u, s) in sigmas.iter().enumerate() {
        let start = &partial[shape.ancestor(u, d0)];
        let leaf = ens.leaf(u);
        energy_change.push((leaf.energy(s)? - leaf.energy(start)?) / nf);
    }
    Ok(Extension { points: level, sigmas, energy_change, increments, fallback })
}

// ---------------------------------------------------------------- Lipschitz probe

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzStats {
    pub max: f64,
    pub mean: f64,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub n: usize,
    pub eps: f64,
    pub reps: usize,
    pub seed: u64,
    /// Perturb only the first this many disorder coefficients.
    pub support: Option<usize>,
}

/// Ratios `||A(H) - A(H')||_N / ||H - H'||_N` with `||H - H'||_N = |g - g'|_2 / sqrt(N)`.
pub fn lipschitz_probe(alg: &(dyn Fn(&Hamiltonian) -> Result<Point> + Sync), m: &Mixture, cfg: &ProbeConfig) -> Result<LipschitzStats> {
    if !(cfg.eps > 0.0) || cfg.reps == 0 {
        return arg("need eps > 0 and at least one repetition");
    }
    let nf = cfg.n as f64;
    let mut ratios = Vec::with_capacity(cfg.reps);
    for r in 0..cfg.reps {
        let h = Hamiltonian::sample(m, cfg.n, rng::derive(cfg.seed, &[label::REPLICA, r as u64]), crate::core_model::DEFAULT_TENSOR_BUDGET)?;
        let mut g = h.coefficients();
        let k = cfg.support.unwrap_or(g.len()).min(g.len());
        let mut rg = rng::stream(cfg.seed, &[label::PROBE, r as u64]);
        let mut dist2 = 0.0;
        for c in g.iter_mut().take(k) {
            let z: f64 = StandardNormal.sample(&mut rg);
            *c += cfg.eps * z;
            dist2 += (cfg.eps * z).powi(2);
        }
        let hp = h.with_coefficients(&g)?;
        let a = alg(&h)?;
        let b = alg(&hp)?;
        let num = norm_sq_n(&(a - b)).sqrt();
        ratios.push(num / (dist2.sqrt() / nf.sqrt()));
    }
    let max = ratios.iter().copied().fold(0.0, f64::max);
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(LipschitzStats { max, mean, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_linear_extrapolates() {
        let f = PiecewiseLinear::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(f.eval(-1.0), -1.0);
        assert_eq!(f.eval(1.5), 2.0);
        assert_eq!(f.eval(3.0), 5.0);
        assert_eq!(f.lipschitz(), 2.0);
        assert!(PiecewiseLinear::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn brownian_refines() {
        let a = brownian_path(3, 8, 0.125, 7);
        let b = brownian_path(3, 16, 0.0625, 7);
        for k in 0..=8 {
            assert_eq!(a[k], b[2 * k]);
        }
    }

    #[test]
    fn delta_steps() {
        assert_eq!(subag_steps(0.05).unwrap(), 20);
        assert!(subag_steps(0.3).is_err());
    }
}
