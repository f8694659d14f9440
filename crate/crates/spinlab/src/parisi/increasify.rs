use super::zeta::PiecewiseZeta;
use crate::ensembles::{chi_align, kappa_level, CorrelationLadder, OverlapLadder, TreeShape};
use crate::error::{arg, Error, Result};
use serde::Serialize;

const RECON_TOL: f64 = 1e-12;

/// `zeta` with its value on `[x, x + delta)` replaced by `zeta(x + delta)`.
pub fn perturb(zeta: &PiecewiseZeta, delta: f64, x: f64) -> Result<PiecewiseZeta> {
    if !(delta >= 0.0 && x >= 0.0 && x + delta < 1.0) {
        return arg(format!("perturbation window [{x}, {}) must lie in [0, 1)", x + delta));
    }
    if delta == 0.0 {
        return Ok(zeta.clone());
    }
    let mut br = Vec::new();
    let mut vals = Vec::new();
    for (s, _, v) in zeta.pieces() {
        if s < x {
            br.push(s);
            vals.push(v);
        }
    }
    br.push(x);
    vals.push(zeta.eval(x + delta));
    for (s, _, v) in zeta.pieces() {
        if s > x + delta {
            br.push(s);
            vals.push(v);
        }
    }
    PiecewiseZeta::new(br, vals)
}

fn restrict_below(zeta: &PiecewiseZeta, q0: f64) -> Result<PiecewiseZeta> {
    if q0 == 0.0 {
        return Ok(PiecewiseZeta::zero());
    }
    let (br, vals): (Vec<f64>, Vec<f64>) = zeta.pieces().filter(|&(s, _, _)| s < q0).map(|(s, _, v)| (s, v)).unzip();
    let mut br = br;
    let mut vals = vals;
    br.push(q0);
    vals.push(0.0);
    PiecewiseZeta::new(br, vals)
}

#[derive(Debug, Clone, Serialize)]
pub struct IncreasifySp {
    pub shape: TreeShape,
    pub p: CorrelationLadder,
    pub q: OverlapLadder,
    /// `zeta_0 < ... < zeta_(D-1)`.
    pub levels: Vec<f64>,
    pub beta: f64,
    /// Target on `[0, q_0)`, zero afterwards.
    pub zeta_under: PiecewiseZeta,
    /// The perturbed target that `beta kappa zeta` reproduces on `[q_0, 1)`.
    pub perturbed: PiecewiseZeta,
    /// Set when some `p_d < Delta`, which voids the monotonicity guarantee.
    pub warning: Option<String>,
}

/// Tree, ladders and increasing levels with `beta kappa zeta` equal to the
/// `(1 - q0) Delta` perturbation of `target` on `[q0, 1)`.
pub fn increasify_sp(
    target: &PiecewiseZeta,
    delta: f64,
    q0: f64,
    chi: &dyn Fn(f64) -> f64,
    beta: f64,
) -> Result<IncreasifySp> {
    if target.values().iter().any(|&v| !(v > 0.0)) {
        return arg("increasify target must be positive-valued");
    }
    if !(delta > 0.0 && delta < 1.0) || !(0.0..1.0).contains(&q0) || !(beta > 0.0) {
        return arg(format!("need Delta in (0, 1), q0 in [0, 1), beta > 0; got {delta}, {q0}, {beta}"));
    }
    let width = (1.0 - q0) * delta;
    let perturbed = perturb(target, width, q0)?;
    let mut qs = vec![q0];
    qs.extend(target.jumps().into_iter().filter(|&x| x > q0 + width && x < 1.0));
    qs.push(1.0);
    let q = OverlapLadder::new(qs)?;
    let p = chi_align(chi, &q)?;
    let dd = q.depth();
    let mut ks = vec![1usize];
    for d in 1..dd {
        let qd = q.qs()[d];
        let ratio = target.eval_left(qd) / (delta * target.eval(qd));
        if !(ratio.is_finite() && ratio < 1e15) {
            return Err(Error::Resource(format!("branching count at q = {qd} is unbounded ({ratio})")));
        }
        ks.push(ratio.floor() as usize + 1);
    }
    let shape = TreeShape::new(ks)?;
    let warning = (1..dd)
        .find(|&d| p.ps()[d] < delta)
        .map(|d| format!("p_{d} = {} is below Delta = {delta}; level monotonicity is not guaranteed", p.ps()[d]));
    let levels: Vec<f64> = (0..dd)
        .map(|d| perturbed.eval(q.qs()[d]) / (beta * kappa_level(&shape, &p, d + 1)))
        .collect();
    for d in 0..dd {
        let want = perturbed.eval(q.qs()[d]);
        let got = beta * kappa_level(&shape, &p, d + 1) * levels[d];
        if (got - want).abs() > RECON_TOL * want.abs().max(1.0) {
            return Err(Error::Numeric(format!("reconstruction at q_{d}: {got} vs {want}")));
        }
    }
    if let Some(d) = (1..dd).find(|&d| !(levels[d] > levels[d - 1])) {
        return Err(Error::Constraint(format!(
            "zeta levels not strictly increasing at d = {d} ({} vs {}); try a larger beta or a chi with p_d >= Delta",
            levels[d - 1],
            levels[d]
        )));
    }
    if !(levels[dd - 1] < 1.0) {
        return Err(Error::Constraint(format!(
            "top zeta level {} is not below 1; increase beta above {}",
            levels[dd - 1],
            perturbed.eval(q.qs()[dd - 1])
        )));
    }
    Ok(IncreasifySp { shape, p, q, levels, beta, zeta_under: restrict_below(target, q0)?, perturbed, warning })
}

#[derive(Debug, Clone, Serialize)]
pub struct IncreasifyIs {
    pub shape: TreeShape,
    pub p: CorrelationLadder,
    pub q: OverlapLadder,
    /// Normalized levels `zeta_hat`, nondecreasing and at most 1.
    pub levels: Vec<f64>,
    /// Clamped target value on each cell.
    pub clamped: Vec<f64>,
    pub k_star: usize,
}

/// Uniform-arm construction: cells of width `delta` from `q0`, target clamped
/// to `[delta, beta]`, all branching numbers `ceil(beta / delta^2)`.
pub fn increasify_is(
    target: &PiecewiseZeta,
    beta: f64,
    delta: f64,
    q0: f64,
    chi: &dyn Fn(f64) -> f64,
) -> Result<IncreasifyIs> {
    if !(delta > 0.0 && delta <= 1.0 && beta >= delta) || !(0.0..1.0).contains(&q0) {
        return arg(format!("need 0 < delta <= min(1, beta) and q0 in [0, 1); got {delta}, {beta}, {q0}"));
    }
    let mut qs = vec![q0];
    while *qs.last().unwrap() < 1.0 {
        let next = qs.last().unwrap() + delta;
        qs.push(if next > 1.0 - 1e-12 { 1.0 } else { next });
    }
    let q = OverlapLadder::new(qs)?;
    let p = chi_align(chi, &q)?;
    let dd = q.depth();
    let k_star = (beta / (delta * delta)).ceil();
    if k_star > 1e15 {
        return Err(Error::Resource(format!("k_* = {k_star} is too large")));
    }
    let k_star = k_star as usize;
    let shape = TreeShape::new(vec![k_star; dd])?;
    let clamped: Vec<f64> = (0..dd).map(|j| target.eval(q.qs()[j]).min(beta).max(delta)).collect();
    let levels: Vec<f64> = (0..dd).map(|d| clamped[d] / (beta * kappa_level(&shape, &p, d + 1))).collect();
    for d in 0..dd {
        let got = beta * kappa_level(&shape, &p, d + 1) * levels[d];
        if (got - clamped[d]).abs() > RECON_TOL * clamped[d].max(1.0) {
            return Err(Error::Numeric(format!("reconstruction at q_{d}: {got} vs {}", clamped[d])));
        }
    }
    if let Some(d) = (1..dd).find(|&d| levels[d] < levels[d - 1]) {
        return Err(Error::Constraint(format!(
            "zeta_hat decreases at d = {d} ({} > {}); p_1 = {} must be at least delta",
            levels[d - 1],
            levels[d],
            p.ps()[1]
        )));
    }
    if levels.iter().any(|&z| z > 1.0 + RECON_TOL) {
        return Err(Error::Constraint("zeta_hat exceeds 1".into()));
    }
    Ok(IncreasifyIs { shape, p, q, levels, clamped, k_star })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_target() {
        let t = PiecewiseZeta::constant(2.0).unwrap();
        let r = increasify_sp(&t, 0.1, 0.2, &|x| x, 10.0).unwrap();
        assert_eq!(r.shape.depth(), 1);
        assert!((r.levels[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn one_downward_jump() {
        let t = PiecewiseZeta::new(vec![0.0, 0.5], vec![3.0, 1.0]).unwrap();
        let r = increasify_sp(&t, 0.2, 0.0, &|x| x, 10.0).unwrap();
        assert_eq!(r.shape.ks(), &[1, 16]);
        assert!(r.levels[0] < r.levels[1]);
    }

    #[test]
    fn is_k_star() {
        let t = PiecewiseZeta::constant(1.0).unwrap();
        let r = increasify_is(&t, 4.0, 0.5, 0.0, &|x| x).unwrap();
        assert_eq!(r.k_star, 16);
        assert_eq!(r.shape.num_leaves(), 256);
    }
}
