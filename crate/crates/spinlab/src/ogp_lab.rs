//! Correlation functions, overlap concentration and branching experiments.

use crate::core_model::{norm_sq_n, overlap, random_on_sphere, Hamiltonian, Landscape, Mixture, Point};
use crate::ensembles::{
    constrained_membership, pair_correlated, sample_ensemble, target_overlap_matrix, underline,
    underline_overlap_matrix, CorrelatedEnsemble, CorrelationLadder, MembershipReport, OverlapLadder, SpinDomain,
    TreeShape,
};
use crate::error::{arg, Result};
use crate::optimizers::{extend_to_sphere, ExtendConfig, ExtendMode};
use crate::rng::{self, label};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

/// An algorithm as a map `(H, seed) -> point`.
pub type Algorithm<'a> = dyn Fn(&Hamiltonian, u64) -> Result<Point> + Sync + 'a;

/// Flags fire beyond this many standard errors.
pub const FLAG_SE: f64 = 3.0;

/// Mean and standard error, computed from offsets to the first value so that
/// identical samples give exactly zero spread.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let x0 = xs[0];
    let md = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - x0 - md).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (x0 + md, var.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct ChiEstimate {
    pub p_grid: Vec<f64>,
    pub chi: Vec<f64>,
    pub se: Vec<f64>,
    pub reps: usize,
    pub algorithm: String,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct ChiConfig {
    pub n: usize,
    pub p_grid: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    /// Feed the pair to the algorithm in swapped order.
    pub swap: bool,
}

/// `chi(p) = E R(A(H1), A(H2))` over `p`-correlated pairs. Each rep shares its
/// `H^[0]` across the grid and uses one algorithm seed for both members.
pub fn estimate_chi(alg: &Algorithm, name: &str, m: &Mixture, cfg: &ChiConfig) -> Result<ChiEstimate> {
    if cfg.reps < 10 {
        return arg(format!("need at least 10 reps, got {}", cfg.reps));
    }
    if cfg.p_grid.is_empty() || cfg.p_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return arg("p grid must be nonempty and inside [0, 1]");
    }
    let rows: Vec<Vec<f64>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let hs = rng::derive(cfg.seed, &[label::REPLICA, r as u64]);
            let asd = rng::derive(cfg.seed, &[label::STEP, r as u64]);
            cfg.p_grid
                .iter()
                .map(|&p| {
                    let (h1, h2) = pair_correlated(m, cfg.n, p, hs)?;
                    let (a, b) = if cfg.swap { (&h2, &h1) } else { (&h1, &h2) };
                    Ok(overlap(&alg(a, asd)?, &alg(b, asd)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut chi = Vec::new();
    let mut se = Vec::new();
    for j in 0..cfg.p_grid.len() {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let (mu, sd) = mean_sd(&col);
        chi.push(mu);
        se.push(sd / (cfg.reps as f64).sqrt());
    }
    Ok(ChiEstimate { p_grid: cfg.p_grid.clone(), chi, se, reps: cfg.reps, algorithm: name.into(), n: cfg.n })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ChiFlag {
    Range { p: f64 },
    Monotone { p_lo: f64, p_hi: f64 },
    Chord { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChiShape {
    Constant,
    Increasing,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChiReport {
    pub flags: Vec<ChiFlag>,
    pub shape: ChiShape,
}

/// Flags range, monotonicity and chord-bound violations beyond three standard errors.
pub fn check_chi_properties(est: &ChiEstimate) -> Result<ChiReport> {
    let ps = &est.p_grid;
    if ps.len() < 3 || ps.len() != est.chi.len() || ps.len() != est.se.len() {
        return arg("need at least 3 grid points with matching estimates");
    }
    let i0 = ps.iter().position(|&p| p == 0.0);
    let i1 = ps.iter().position(|&p| p == 1.0);
    let (Some(i0), Some(i1)) = (i0, i1) else {
        return arg("grid must contain 0 and 1");
    };
    if ps.windows(2).any(|w| !(w[1] > w[0])) {
        return arg("grid must be strictly increasing");
    }
    let (c, s) = (&est.chi, &est.se);
    let (c0, c1, s0, s1) = (c[i0], c[i1], s[i0], s[i1]);
    let mut flags = Vec::new();
    if c1 > 1.0 + FLAG_SE * s1 {
        flags.push(ChiFlag::Range { p: 1.0 });
    }
    for (j, &p) in ps.iter().enumerate() {
        let lo = c[j] < -FLAG_SE * s[j];
        let hi = j != i1 && c[j] > c1 + FLAG_SE * (s[j].hypot(s1));
        if lo || hi {
            flags.push(ChiFlag::Range { p });
        }
        let chord = (1.0 - p) * c0 + p * c1;
        let sc = (s[j].powi(2) + ((1.0 - p) * s0).powi(2) + (p * s1).powi(2)).sqrt();
        if j != i0 && j != i1 && c[j] > chord + FLAG_SE * sc {
            flags.push(ChiFlag::Chord { p });
        }
    }
    for j in 1..ps.len() {
        if c[j] < c[j - 1] - FLAG_SE * s[j].hypot(s[j - 1]) {
            flags.push(ChiFlag::Monotone { p_lo: ps[j - 1], p_hi: ps[j] });
        }
    }
    let shape = if (c1 - c0).abs() <= FLAG_SE * s0.hypot(s1) + 1e-12 { ChiShape::Constant } else { ChiShape::Increasing };
    Ok(ChiReport { flags, shape })
}

#[derive(Debug, Clone, Serialize)]
pub struct Concentration {
    pub mean: f64,
    pub sd: f64,
    /// Fraction of reps with `|R - mean| >= lambda`.
    pub fraction: f64,
    /// 95% Wilson interval for that fraction.
    pub wilson: (f64, f64),
    pub overlaps: Vec<f64>,
}

fn wilson(k: usize, n: usize) -> (f64, f64) {
    let z = 1.959_963_984_540_054f64;
    let nf = n as f64;
    let ph = k as f64 / nf;
    let den = 1.0 + z * z / nf;
    let centre = (ph + z * z / (2.0 * nf)) / den;
    let half = z * (ph * (1.0 - ph) / nf + z * z / (4.0 * nf * nf)).sqrt() / den;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn overlap_concentration(alg: &Algorithm, m: &Mixture, n: usize, p: f64, reps: usize, lambda: f64, seed: u64) -> Result<Concentration> {
    if reps < 30 {
        return arg(format!("need at least 30 reps, got {reps}"));
    }
    if !(lambda >= 0.0) {
        return arg("lambda must be nonnegative");
    }
    let overlaps: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let (h1, h2) = pair_correlated(m, n, p, rng::derive(seed, &[label::REPLICA, r as u64]))?;
            let asd = rng::derive(seed, &[label::STEP, r as u64]);
            Ok(overlap(&alg(&h1, asd)?, &alg(&h2, asd)?))
        })
        .collect::<Result<_>>()?;
    let (mean, sd) = mean_sd(&overlaps);
    let k = overlaps.iter().filter(|r| (*r - mean).abs() >= lambda).count();
    Ok(Concentration { mean, sd, fraction: k as f64 / reps as f64, wilson: wilson(k, reps), overlaps })
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn max_abs_dev(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtendedRun {
    pub energies: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub max_dev: f64,
    pub membership: MembershipReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchingRun {
    pub seed: u64,
    /// `H^u(sigma(u)) / N` on the truncated leaves.
    pub energies: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub max_dev: f64,
    pub grand_energy: f64,
    pub extended: Option<ExtendedRun>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchingReport {
    pub ks: Vec<usize>,
    pub ps: Vec<f64>,
    pub qs: Vec<f64>,
    pub underline_depth: usize,
    pub target: Vec<Vec<f64>>,
    pub runs: Vec<BranchingRun>,
    pub mean_max_dev: f64,
}

#[derive(Debug, Clone)]
pub struct BranchingConfig {
    pub n: usize,
    pub shape: TreeShape,
    pub p: CorrelationLadder,
    pub q: OverlapLadder,
    pub eta: f64,
    pub reps: usize,
    pub seed: u64,
    /// `chi(1)` used to cap the truncated target.
    pub chi1: f64,
    /// Grow outputs to full leaves with spherical increments and re-check.
    pub extend: bool,
}

/// Runs `alg` on each truncated leaf Hamiltonian and compares the overlap matrix with the target.
pub fn run_branching_experiment(alg: &Algorithm, m: &Mixture, cfg: &BranchingConfig) -> Result<BranchingReport> {
    if cfg.reps == 0 {
        return arg("need at least one rep");
    }
    let ul = underline(&cfg.shape, &cfg.p)?;
    let target = underline_overlap_matrix(&cfg.shape, &cfg.p, &cfg.q, cfg.chi1)?;
    let k_low = ul.shape.num_leaves();
    // first full leaf below each truncated leaf
    let stride = cfg.shape.num_leaves() / k_low;
    let runs: Vec<BranchingRun> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| -> Result<BranchingRun> {
            let es = rng::derive(cfg.seed, &[label::REPLICA, r as u64]);
            let asd = rng::derive(cfg.seed, &[label::STEP, r as u64]);
            let ens = sample_ensemble(m, cfg.n, &cfg.shape, &cfg.p, es)?;
            let mut outs = Vec::with_capacity(k_low);
            let mut energies = Vec::with_capacity(k_low);
            for j in 0..k_low {
                let h = ens.leaf_hamiltonian(j * stride)?;
                let x = alg(&h, asd)?;
                energies.push(h.energy(&x)? / cfg.n as f64);
                outs.push(x);
            }
            let rm = DMatrix::from_fn(k_low, k_low, |i, j| overlap(&outs[i], &outs[j]));
            let max_dev = max_abs_dev(&rm, &target);
            let extended = if cfg.extend { Some(extend_run(&ens, cfg, ul.depth, &outs, asd)?) } else { None };
            Ok(BranchingRun { seed: es, grand_energy: energies.iter().sum(), energies, r: to_rows(&rm), max_dev, extended })
        })
        .collect::<Result<_>>()?;
    let mean_max_dev = runs.iter().map(|r| r.max_dev).sum::<f64>() / runs.len() as f64;
    Ok(BranchingReport {
        ks: cfg.shape.ks().to_vec(),
        ps: cfg.p.ps().to_vec(),
        qs: cfg.q.qs().to_vec(),
        underline_depth: ul.depth,
        target: to_rows(&target),
        runs,
        mean_max_dev,
    })
}

fn extend_run(ens: &CorrelatedEnsemble, cfg: &BranchingConfig, depth: usize, outs: &[Point], seed: u64) -> Result<ExtendedRun> {
    let n = cfg.n;
    let qd = cfg.q.qs()[depth];
    // scale outputs into the ball of squared radius q at the truncation depth
    let partial: Vec<Point> = outs
        .iter()
        .map(|x| {
            let s = norm_sq_n(x);
            if s > qd && s > 0.0 {
                x * (qd / s).sqrt()
            } else {
                x.clone()
            }
        })
        .collect();
    let ecfg = ExtendConfig { mode: ExtendMode::Spherical, start_depth: depth, step: 0.05, seed };
    let centre = Point::zeros(n);
    let ext = extend_to_sphere(ens, &cfg.q, &partial, &centre, &ecfg)?;
    let full = target_overlap_matrix(&cfg.shape, &cfg.q)?;
    let k = ext.sigmas.len();
    let rm = DMatrix::from_fn(k, k, |i, j| overlap(&ext.sigmas[i], &ext.sigmas[j]));
    let membership = constrained_membership(&ext.sigmas, &full, &centre, cfg.eta, SpinDomain::Sphere);
    let energies = (0..k)
        .map(|u| ens.leaf(u).energy(&ext.sigmas[u]).map(|e| e / n as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtendedRun { energies, max_dev: max_abs_dev(&rm, &full), r: to_rows(&rm), membership })
}

// ---------------------------------------------------------------- constrained maximization

pub const PENALTY_START: f64 = 10.0;
pub const PENALTY_ESCALATIONS: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct GrandMaxConfig {
    pub eta: f64,
    pub restarts: usize,
    pub seed: u64,
    pub iters: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrandMax {
    /// Best membership-checked grand energy / N, absent if no restart was feasible.
    pub best: Option<f64>,
    pub feasible_restarts: usize,
    pub per_restart: Vec<Option<f64>>,
}

/// Penalty excess `(|d| - eta/2)_+` and its sign.
fn excess(d: f64, eta: f64) -> f64 {
    let e = d.abs() - eta / 2.0;
    if e > 0.0 {
        e * d.signum()
    } else {
        0.0
    }
}

fn penalized_ascent(
    e: &CorrelatedEnsemble,
    q: &DMatrix<f64>,
    m: &Point,
    cfg: &GrandMaxConfig,
    start: Vec<Point>,
) -> Result<Option<f64>> {
    let k = start.len();
    let nf = e.n() as f64;
    let q0 = norm_sq_n(m);
    let mut sig = start;
    let mut lambda = PENALTY_START;
    let sphere = |x: Point| {
        let s = norm_sq_n(&x).sqrt();
        x / s
    };
    for _ in 0..=PENALTY_ESCALATIONS {
        for _ in 0..cfg.iters {
            let mut next = Vec::with_capacity(k);
            for u in 0..k {
                let mut g = e.leaf(u).gradient(&sig[u])?;
                for v in 0..k {
                    if v != u {
                        let d = excess(overlap(&sig[u], &sig[v]) - q[(u, v)], cfg.eta);
                        g.axpy(-2.0 * lambda * d, &sig[v], 1.0);
                    }
                }
                let d = excess(overlap(&sig[u], m) - q0, cfg.eta);
                g.axpy(-2.0 * lambda * d, m, 1.0);
                next.push(sphere(&sig[u] + g * cfg.lr));
            }
            sig = next;
        }
        if constrained_membership(&sig, q, m, cfg.eta, SpinDomain::Sphere).member {
            let total: f64 = (0..k).map(|u| e.leaf(u).energy(&sig[u])).sum::<Result<f64>>()?;
            return Ok(Some(total / nf));
        }
        lambda *= 2.0;
    }
    Ok(None)
}

/// Multi-restart penalized projected ascent over sphere tuples; a heuristic lower bound.
pub fn constrained_grand_max(e: &CorrelatedEnsemble, q: &DMatrix<f64>, m: &Point, cfg: &GrandMaxConfig) -> Result<GrandMax> {
    let k = e.shape().num_leaves();
    if q.nrows() != k || q.ncols() != k || m.len() != e.n() {
        return arg("target matrix or centre has the wrong size");
    }
    if cfg.restarts == 0 || !(cfg.lr > 0.0) {
        return arg("need at least one restart and a positive step");
    }
    let per_restart: Vec<Option<f64>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rg = rng::stream(cfg.seed, &[label::INIT, r as u64]);
            let start = (0..k).map(|_| random_on_sphere(e.n(), 1.0, &mut rg)).collect();
            penalized_ascent(e, q, m, cfg, start)
        })
        .collect::<Result<_>>()?;
    let feasible: Vec<f64> = per_restart.iter().flatten().copied().collect();
    let best = feasible.iter().copied().reduce(f64::max);
    Ok(GrandMax { best, feasible_restarts: feasible.len(), per_restart })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_zero_spread() {
        let (m, s) = mean_sd(&[0.1; 30]);
        assert_eq!(m, 0.1);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn wilson_brackets() {
        let (lo, hi) = wilson(0, 30);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.2);
    }
}
