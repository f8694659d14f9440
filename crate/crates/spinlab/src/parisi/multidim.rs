use super::cascade::composite_zeta;
use super::pde::{phi_value, PdeGrid};
use super::zeta::PiecewiseZeta;
use crate::core_model::Mixture;
use crate::ensembles::{m_matrix, CorrelationLadder, OverlapLadder, TreeShape};
use crate::error::{arg, Result};
use crate::rng::{self, label, Rng};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

pub const MIN_MC_SAMPLES: usize = 100_000;
const INNER: usize = 64;
const MIN_OUTER: usize = 100;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Jackknife bias correction applied at the outer level.
    pub bias_correction: f64,
    pub outer_samples: usize,
}

struct Level {
    zeta: f64,
    factor: DMatrix<f64>,
}

fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d
}

/// Jackknife-corrected `(1/z) log mean exp(z y)` (plain mean at `z = 0`), its
/// jackknife standard error, and the bias correction applied.
fn jackknife(ys: &[f64], z: f64) -> (f64, f64, f64) {
    let n = ys.len() as f64;
    if z == 0.0 {
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0);
        return (mean, (var / n).sqrt(), 0.0);
    }
    let top = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = ys.iter().map(|y| (z * (y - top)).exp()).collect();
    let s: f64 = ws.iter().sum();
    let full = top + (s / n).ln() / z;
    let loo: Vec<f64> = ws.iter().map(|w| top + (((s - w).max(f64::MIN_POSITIVE)) / (n - 1.0)).ln() / z).collect();
    let loo_mean = loo.iter().sum::<f64>() / n;
    let corrected = n * full - (n - 1.0) * loo_mean;
    let se = ((n - 1.0) / n * loo.iter().map(|v| (v - loo_mean) * (v - loo_mean)).sum::<f64>()).sqrt();
    (corrected, se, corrected - full)
}

fn terminal_sum(a: f64, x: &DVector<f64>) -> f64 {
    x.iter().map(|&v| v.abs() + (-2.0 * v.abs()).exp().ln_1p() - a * v).sum()
}

fn nested(levels: &[Level], i: usize, x: &DVector<f64>, a: f64, rng: &mut Rng) -> f64 {
    if i == levels.len() {
        return terminal_sum(a, x);
    }
    let k = x.len();
    let ys: Vec<f64> = (0..INNER)
        .map(|_| {
            let g = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
            nested(levels, i + 1, &(x + &levels[i].factor * g), a, rng)
        })
        .collect();
    jackknife(&ys, levels[i].zeta).0
}

/// Nested Monte Carlo estimate of the tree-indexed Parisi function at `t = 0`
/// with terminal `sum_u log(2 cosh x(u)) - a x(u)`.
#[allow(clippy::too_many_arguments)]
pub fn phi_multidim_mc(
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
    levels: &[f64],
    a: f64,
    x: &[f64],
    m: &Mixture,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let k = shape.num_leaves();
    if k > 4 {
        return arg(format!("at most 4 leaves supported, got {k}"));
    }
    if x.len() != k || levels.len() != shape.depth() || q.depth() != shape.depth() {
        return arg("leaf vector, levels and ladders must match the tree");
    }
    if samples < MIN_MC_SAMPLES {
        return arg(format!("need at least {MIN_MC_SAMPLES} samples"));
    }
    if !(-1.0..=1.0).contains(&a) || levels.iter().any(|z| !(*z >= 0.0)) {
        return arg("need a in [-1, 1] and nonnegative levels");
    }
    let qs = q.qs();
    let mut lv = Vec::new();
    let xi1q0 = m.xi1(qs[0]);
    if xi1q0 > 0.0 {
        lv.push(Level { zeta: 0.0, factor: psd_sqrt(&(m_matrix(shape, p, 1)? * xi1q0)) });
    }
    for (d, &z) in levels.iter().enumerate() {
        let c = m.xi1(qs[d + 1]) - m.xi1(qs[d]);
        lv.push(Level { zeta: z, factor: psd_sqrt(&(m_matrix(shape, p, d + 1)? * c)) });
    }
    let inner_cost = INNER.pow((lv.len() - 1) as u32);
    let outer = (samples / inner_cost).max(MIN_OUTER);
    let mut rng = rng::stream(seed, &[label::MC]);
    let x0 = DVector::from_column_slice(x);
    let ys: Vec<f64> = (0..outer)
        .map(|_| {
            let g = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(&mut rng)));
            nested(&lv, 1, &(&x0 + &lv[0].factor * g), a, &mut rng)
        })
        .collect();
    let (estimate, std_error, bias_correction) = jackknife(&ys, lv[0].zeta);
    Ok(McEstimate { estimate, std_error, bias_correction, outer_samples: outer })
}

/// `kappa zeta` on `[q_0, 1)`, zero below: the one-dimensional comparison profile.
pub fn kappa_zeta_profile(
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
    levels: &[f64],
) -> Result<PiecewiseZeta> {
    composite_zeta(&PiecewiseZeta::zero(), levels, 1.0, shape, p, q)
}

/// `sum_u Phi_{a, kappa zeta}(0, x(u))` with the `beta = 1` terminal.
#[allow(clippy::too_many_arguments)]
pub fn phi_leafwise_bound(
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
    levels: &[f64],
    a: f64,
    x: &[f64],
    m: &Mixture,
    grid: PdeGrid,
) -> Result<f64> {
    let prof = kappa_zeta_profile(shape, p, q, levels)?;
    x.iter().map(|&xu| phi_value(m, &prof, a, 1.0, xu, grid)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jackknife_mean_case() {
        let (m, se, b) = jackknife(&[1.0, 2.0, 3.0, 4.0], 0.0);
        assert_eq!(m, 2.5);
        assert_eq!(b, 0.0);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-14);
    }
}
