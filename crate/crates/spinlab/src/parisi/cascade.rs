use super::spherical::parisi_sp;
use super::zeta::PiecewiseZeta;
use crate::core_model::Mixture;
use crate::ensembles::{kappa_level, m_matrix, CorrelationLadder, OverlapLadder, TreeShape};
use crate::error::{arg, Error, Result};
use crate::quad::{self, ABS_TOL};
use nalgebra::{Cholesky, DMatrix, DVector};

/// `theta(q) = (q - q0) xi'(q) - xi(q) + xi(q0)`.
pub fn theta(m: &Mixture, q0: f64, q: f64) -> Result<f64> {
    if !(q0 <= q && q <= 1.0) {
        return arg(format!("theta needs q0 <= q <= 1, got q0 = {q0}, q = {q}"));
    }
    Ok((q - q0) * m.xi1(q) - m.xi(q) + m.xi(q0))
}

fn check_ladders(shape: &TreeShape, p: &CorrelationLadder, q: &OverlapLadder, levels: &[f64]) -> Result<()> {
    let d = shape.depth();
    if p.depth() != d || q.depth() != d {
        return arg(format!("ladder depths ({}, {}) do not match tree depth {d}", p.depth(), q.depth()));
    }
    if levels.len() != d {
        return arg(format!("expected {d} zeta levels, got {}", levels.len()));
    }
    Ok(())
}

fn check_strict_levels(levels: &[f64]) -> Result<()> {
    let ok = levels.first().is_some_and(|&z| z > 0.0)
        && levels.windows(2).all(|w| w[0] < w[1])
        && levels.last().is_some_and(|&z| z < 1.0);
    if !ok {
        return arg(format!("zeta levels must satisfy 0 < z_0 < ... < z_(D-1) < 1, got {levels:?}"));
    }
    Ok(())
}

/// `(K/2) sum_d kappa(q_d) zeta_d (theta(q_{d+1}) - theta(q_d))`.
pub fn cascade_value(
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
    levels: &[f64],
    m: &Mixture,
) -> Result<f64> {
    check_ladders(shape, p, q, levels)?;
    check_strict_levels(levels)?;
    let qs = q.qs();
    let mut s = 0.0;
    for (d, z) in levels.iter().enumerate() {
        let dt = theta(m, qs[0], qs[d + 1])? - theta(m, qs[0], qs[d])?;
        s += kappa_level(shape, p, d + 1) * z * dt;
    }
    Ok(0.5 * shape.num_leaves() as f64 * s)
}

/// The same value as `cascade_value` through `(K/2) int (q - q0) xi'' kappa zeta`.
pub fn cascade_integral(
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
    levels: &[f64],
    m: &Mixture,
) -> Result<f64> {
    check_ladders(shape, p, q, levels)?;
    check_strict_levels(levels)?;
    let qs = q.qs();
    let mut s = 0.0;
    for (d, z) in levels.iter().enumerate() {
        let w = kappa_level(shape, p, d + 1) * z;
        s += w * quad::integrate(|t| (t - qs[0]) * m.xi2(t), qs[d], qs[d + 1], ABS_TOL);
    }
    Ok(0.5 * shape.num_leaves() as f64 * s)
}

fn chol(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(a.clone()).ok_or_else(|| Error::Domain(format!("{what} is not positive definite")))
}

fn log_det(c: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Closed form of `(1/zeta) log E exp (zeta/2)[(y+eta)' L^-1 (y+eta) - 2 v'(y+eta)]`, `eta ~ N(0, S)`.
pub fn gaussian_quadratic_logmoment(
    lambda: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    zeta: f64,
    v: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let k = lambda.nrows();
    if lambda.shape() != (k, k) || sigma.shape() != (k, k) || v.len() != k || y.len() != k {
        return arg("dimension mismatch in gaussian_quadratic_logmoment");
    }
    if !(zeta > 0.0) {
        return arg(format!("zeta must be positive, got {zeta}"));
    }
    let cl = chol(lambda, "Lambda")?;
    let diff = lambda - sigma * zeta;
    let cd = chol(&diff, "Lambda - zeta Sigma")?;
    let dy = cd.solve(y);
    let lv = lambda * v;
    let quad_y = y.dot(&dy) - 2.0 * lv.dot(&dy);
    let logdet = (log_det(&cl) - log_det(&cd)) / (2.0 * zeta);
    let tail = (sigma * v * zeta).dot(&cd.solve(&lv));
    Ok(0.5 * quad_y + logdet + 0.5 * tail)
}

#[derive(Debug, Clone)]
pub struct LambdaSequence {
    /// `Lambda_0, ..., Lambda_D`.
    pub lambdas: Vec<DMatrix<f64>>,
    /// `v_d = B a Lambda_d^-1 1`.
    pub vs: Vec<DVector<f64>>,
    /// `(1/zeta_d) log(|Lambda_{d+1}| / |Lambda_d|)`, with its limit at `zeta_d = 0`.
    pub logdet_increments: Vec<f64>,
    /// `B_{kappa zeta}(q_d)` for `d = 0..=D`.
    pub b_kappa: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LambdaResult {
    pub seq: LambdaSequence,
    pub value: f64,
    pub bound: f64,
}

/// Gaussian recursion: `Lambda_D = B I`, `Lambda_d = Lambda_{d+1} - zeta_d (xi'(q_{d+1}) - xi'(q_d)) M^{d+1}`.
///
/// `value` is the exact expectation assembled from the sequence and `bound`
/// the matching upper bound in terms of `B_{kappa zeta}`.
#[allow(clippy::too_many_arguments)]
pub fn lambda_recursion(
    b: f64,
    levels: &[f64],
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
    m: &Mixture,
    a: f64,
    lam: f64,
) -> Result<LambdaResult> {
    check_ladders(shape, p, q, levels)?;
    if levels.iter().any(|z| !(z.is_finite() && *z >= 0.0)) {
        return arg(format!("zeta levels must be nonnegative, got {levels:?}"));
    }
    let dd = shape.depth();
    let k = shape.num_leaves();
    let qs = q.qs();
    let ms: Vec<DMatrix<f64>> = (1..=dd).map(|d| m_matrix(shape, p, d)).collect::<Result<_>>()?;

    let mut b_kappa = vec![0.0; dd + 1];
    b_kappa[dd] = b;
    for d in (0..dd).rev() {
        let s = kappa_level(shape, p, d + 1) * levels[d];
        b_kappa[d] = b_kappa[d + 1] - s * (m.xi1(qs[d + 1]) - m.xi1(qs[d]));
    }
    if let Some(d) = (0..=dd).find(|&d| !(b_kappa[d] > 0.0)) {
        return Err(Error::Domain(format!("B_kappa_zeta(q_{d}) = {} is not positive", b_kappa[d])));
    }

    let mut lambdas = vec![DMatrix::<f64>::zeros(k, k); dd + 1];
    lambdas[dd] = DMatrix::identity(k, k) * b;
    let mut incs = vec![0.0; dd];
    for d in (0..dd).rev() {
        let c = m.xi1(qs[d + 1]) - m.xi1(qs[d]);
        let step = &ms[d] * c;
        lambdas[d] = &lambdas[d + 1] - &step * levels[d];
        let upper = chol(&lambdas[d + 1], &format!("Lambda_{}", d + 1))?;
        let lmat = upper.l();
        let linv = lmat
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric(format!("Cholesky factor of Lambda_{} is singular", d + 1)))?;
        let whitened = &linv * &step * linv.transpose();
        let mus = nalgebra::SymmetricEigen::new((&whitened + whitened.transpose()) * 0.5).eigenvalues;
        let z = levels[d];
        let mut inc = 0.0;
        for mu in mus.iter() {
            let x = z * mu;
            if x >= 1.0 {
                return Err(Error::Domain(format!("Lambda_{d} is not positive definite")));
            }
            inc += if z == 0.0 { *mu } else { -(-x).ln_1p() / z };
        }
        incs[d] = inc;
        let min_eig = nalgebra::SymmetricEigen::new(lambdas[d].clone()).eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::Domain(format!("Lambda_{d} is not positive definite (min eigenvalue {min_eig})")));
        }
        if min_eig < b_kappa[d] - 1e-10 * b.abs().max(1.0) {
            return Err(Error::Numeric(format!(
                "Lambda_{d} has min eigenvalue {min_eig} below B_kappa_zeta(q_{d}) = {}",
                b_kappa[d]
            )));
        }
    }

    let ones = DVector::from_element(k, 1.0);
    let mut vs = Vec::with_capacity(dd + 1);
    for (d, l) in lambdas.iter().enumerate() {
        let c = chol(l, &format!("Lambda_{d}"))?;
        vs.push(c.solve(&ones) * (b * a));
    }
    let c0 = chol(&lambdas[0], "Lambda_0")?;
    let field = m.h() + (lam - b) * a;
    let one_l_one = ones.dot(&c0.solve(&ones));
    let m1 = &ms[0];
    let tr = (c0.solve(m1)).trace();
    let xi1q0 = m.xi1(qs[0]);
    let value = 0.5 * (field * field * one_l_one + xi1q0 * tr + incs.iter().sum::<f64>() - k as f64 * b * a * a);

    let mut integral = 0.0;
    for d in 0..dd {
        let s = kappa_level(shape, p, d + 1) * levels[d];
        let c = m.xi1(qs[d + 1]) - m.xi1(qs[d]);
        integral += if s * c > 1e-14 * b_kappa[d + 1] {
            (b_kappa[d + 1] / b_kappa[d]).ln() / s
        } else {
            c / b_kappa[d + 1]
        };
    }
    let bound = 0.5 * k as f64 * ((field * field + xi1q0) / b_kappa[0] + integral - b * a * a);
    if value > bound + 1e-8 * bound.abs().max(1.0) {
        return Err(Error::Numeric(format!("recursion value {value} exceeds its bound {bound}")));
    }
    Ok(LambdaResult { seq: LambdaSequence { lambdas, vs, logdet_increments: incs, b_kappa }, value, bound })
}

/// `zeta_under` on `[0, q_0)` followed by `beta kappa(q_d) zeta_d` on `[q_d, q_{d+1})`.
pub fn composite_zeta(
    zeta_under: &PiecewiseZeta,
    levels: &[f64],
    beta: f64,
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
) -> Result<PiecewiseZeta> {
    check_ladders(shape, p, q, levels)?;
    let qs = q.qs();
    let mut br = Vec::new();
    let mut vals = Vec::new();
    for (s, _, v) in zeta_under.pieces() {
        if s < qs[0] {
            br.push(s);
            vals.push(v);
        }
    }
    for (d, z) in levels.iter().enumerate() {
        br.push(qs[d]);
        vals.push(beta * kappa_level(shape, p, d + 1) * z);
    }
    PiecewiseZeta::new(br, vals)
}

/// Inputs of the spherical interpolation bound besides the tree data.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub b: f64,
    pub beta: f64,
    pub eta: f64,
    pub c: f64,
    pub n: usize,
}

/// `K P(B, zeta_under + beta kappa zeta) + C K^2 (beta eta + B eta + log(1/eta)/beta + 1/sqrt(N))`.
pub fn interpolation_bound_sp(
    params: BoundParams,
    zeta_under: &PiecewiseZeta,
    levels: &[f64],
    shape: &TreeShape,
    p: &CorrelationLadder,
    q: &OverlapLadder,
    m: &Mixture,
) -> Result<f64> {
    let BoundParams { b, beta, eta, c, n } = params;
    if !(beta > 0.0) || b < 1.0 / beta {
        return Err(Error::Domain(format!("need B >= 1/beta, got B = {b}, beta = {beta}")));
    }
    if !(eta > 0.0 && eta <= 1.0) || n == 0 {
        return arg(format!("need eta in (0, 1] and N >= 1, got eta = {eta}, N = {n}"));
    }
    let composite = composite_zeta(zeta_under, levels, beta, shape, p, q)?;
    let k = shape.num_leaves() as f64;
    let main = parisi_sp(b, &composite, m)?;
    let err = beta * eta + b * eta + (1.0 / eta).ln() / beta + 1.0 / (n as f64).sqrt();
    Ok(k * main + c * k * k * err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_examples() {
        let m = Mixture::pure(2, 0.0).unwrap();
        assert_eq!(theta(&m, 0.3, 0.3).unwrap(), 0.0);
        assert!((theta(&m, 0.0, 0.6).unwrap() - 0.36).abs() < 1e-15);
        assert!(theta(&m, 0.5, 0.4).is_err());
    }

    #[test]
    fn scalar_logmoment() {
        let one = |x: f64| DMatrix::from_element(1, 1, x);
        let v = gaussian_quadratic_logmoment(&one(2.0), &one(1.0), 1.0, &DVector::zeros(1), &DVector::from_element(1, 1.0))
            .unwrap();
        assert!((v - (0.5 + 0.5 * 2f64.ln())).abs() < 1e-14);
        assert!(gaussian_quadratic_logmoment(&one(1.0), &one(1.0), 1.0, &DVector::zeros(1), &DVector::zeros(1)).is_err());
    }
}
