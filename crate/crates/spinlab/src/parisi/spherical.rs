use super::zeta::PiecewiseZeta;
use crate::core_model::Mixture;
use crate::error::{arg, Error, Result};
use crate::quad::{self, ABS_TOL};
use serde::Serialize;

/// `B_zeta(t) = B - int_t^1 xi'' zeta`.
pub fn b_profile(b: f64, zeta: &PiecewiseZeta, m: &Mixture, t: f64) -> f64 {
    b - zeta.integral_xi2(m, t, 1.0)
}

/// Spherical Parisi functional `1/2 [h^2 / B_zeta(0) + int_0^1 (xi'' / B_zeta + B_zeta)]`.
pub fn parisi_sp(b: f64, zeta: &PiecewiseZeta, m: &Mixture) -> Result<f64> {
    let b0 = b_profile(b, zeta, m, 0.0);
    if !(b0 > 0.0) {
        return Err(Error::Domain(format!("B = {b} does not exceed int xi'' zeta (B_zeta(0) = {b0})")));
    }
    let integrand = |t: f64| {
        let bt = b_profile(b, zeta, m, t);
        m.xi2(t) / bt + bt
    };
    let integral = quad::integrate_pieces(integrand, 0.0, 1.0, zeta.breakpoints(), ABS_TOL);
    Ok(0.5 * (m.h() * m.h() / b0 + integral))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    #[serde(rename = "replica-symmetric")]
    ReplicaSymmetric,
    #[serde(rename = "full-rsb-tail")]
    FullRsbTail,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgSp {
    pub value: f64,
    pub regime: Regime,
    pub q_hat: f64,
}

/// Closed-form spherical algorithmic threshold.
pub fn alg_sp(m: &Mixture) -> AlgSp {
    let h2 = m.h() * m.h();
    if h2 + m.xi1(1.0) >= m.xi2(1.0) {
        return AlgSp { value: (h2 + m.xi1(1.0)).sqrt(), regime: Regime::ReplicaSymmetric, q_hat: 1.0 };
    }
    let f = |q: f64| q * m.xi2(q) - m.xi1(q) - h2;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        if hi - lo <= 1e-15 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q_hat = 0.5 * (lo + hi);
    let tail = quad::integrate(|q| m.xi2(q).sqrt(), q_hat, 1.0, ABS_TOL);
    AlgSp { value: q_hat * m.xi2(q_hat).sqrt() + tail, regime: Regime::FullRsbTail, q_hat }
}

/// Step approximation of the minimizing profile for the spherical threshold.
///
/// Zero below `q_hat`; on `knots` uniform cells of `[q_hat, 1)` the steps are
/// chosen so that `B_zeta` agrees with `sqrt(xi'')` at every cell endpoint.
/// Returns `(B, zeta)` with `B = sqrt(xi''(1))`.
pub fn best_zeta_steps(m: &Mixture, q_hat: f64, knots: usize) -> Result<(f64, PiecewiseZeta)> {
    if !(0.0..1.0).contains(&q_hat) || knots == 0 {
        return arg("q_hat must lie in [0, 1) and knots >= 1");
    }
    let mut br = Vec::new();
    let mut vals = Vec::new();
    if q_hat > 0.0 {
        br.push(0.0);
        vals.push(0.0);
    }
    let target = |q: f64| m.xi2(q).sqrt();
    for i in 0..knots {
        let a = q_hat + (1.0 - q_hat) * i as f64 / knots as f64;
        let b = q_hat + (1.0 - q_hat) * (i + 1) as f64 / knots as f64;
        br.push(a);
        vals.push(((target(b) - target(a)) / (m.xi1(b) - m.xi1(a))).max(0.0));
    }
    Ok((target(1.0), PiecewiseZeta::new(br, vals)?))
}

fn log1p_over_x(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 - x / 2.0 + x * x / 3.0
    } else {
        x.ln_1p() / x
    }
}

fn psi(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        -0.5 + 2.0 * x / 3.0 - 0.75 * x * x + 0.8 * x * x * x
    } else {
        (x / (1.0 + x) - x.ln_1p()) / (x * x)
    }
}

/// Discretized spherical functional in the variables `(B_zeta(0), zeta steps)`.
struct SpGrid {
    h2: f64,
    dt: Vec<f64>,
    c: Vec<f64>,
    e: Vec<f64>,
}

impl SpGrid {
    fn new(m: &Mixture, cells: usize) -> Self {
        let t: Vec<f64> = (0..=cells).map(|i| i as f64 / cells as f64).collect();
        let mut dt = Vec::new();
        let mut c = Vec::new();
        let mut e = Vec::new();
        for w in t.windows(2) {
            let d = w[1] - w[0];
            dt.push(d);
            c.push(m.xi1(w[1]) - m.xi1(w[0]));
            e.push(m.xi(w[1]) - m.xi(w[0]) - m.xi1(w[0]) * d);
        }
        SpGrid { h2: m.h() * m.h(), dt, c, e }
    }

    /// Value and gradient with respect to `(beta0, z)`.
    fn eval(&self, beta0: f64, z: &[f64]) -> (f64, f64, Vec<f64>) {
        let n = z.len();
        let mut beta = Vec::with_capacity(n + 1);
        beta.push(beta0);
        for i in 0..n {
            beta.push(beta[i] + z[i] * self.c[i]);
        }
        let mut f = self.h2 / beta0;
        let mut g_beta = vec![0.0; n];
        let mut g_z = vec![0.0; n];
        for i in 0..n {
            let r = self.c[i] / beta[i];
            let x = z[i] * r;
            f += r * log1p_over_x(x) + beta[i] * self.dt[i] + z[i] * self.e[i];
            g_beta[i] = 0.5 * (-self.c[i] / (beta[i] * beta[i + 1]) + self.dt[i]);
            g_z[i] = 0.5 * (r * r * psi(x) + self.e[i]);
        }
        let mut tail = 0.0;
        for j in (0..n).rev() {
            g_z[j] += self.c[j] * tail;
            tail += g_beta[j];
        }
        let g0 = -0.5 * self.h2 / (beta0 * beta0) + tail;
        (0.5 * f, g0, g_z)
    }
}

/// Numerical infimum of the spherical functional over step profiles on a
/// uniform grid of `grid` cells.
///
/// With `monotone = true` the steps are constrained nondecreasing (the
/// ground-state formula); otherwise they are only nonnegative (the
/// algorithmic formula). Solved by accelerated projected gradient with
/// backtracking, starting from `zeta = 0`, `B = sqrt(max(xi''(1), h^2 + xi'(1)))`.
pub fn sp_numeric(m: &Mixture, grid: usize, monotone: bool) -> Result<f64> {
    if grid < 16 {
        return arg("grid must be at least 16");
    }
    let sg = SpGrid::new(m, grid);
    const BETA_MIN: f64 = 1e-9;
    let to_z = |w: &[f64]| -> Vec<f64> {
        if monotone {
            w.iter()
                .scan(0.0, |acc, &v| {
                    *acc += v;
                    Some(*acc)
                })
                .collect()
        } else {
            w.to_vec()
        }
    };
    let value = |b0: f64, w: &[f64]| -> (f64, f64, Vec<f64>) {
        let (f, g0, gz) = sg.eval(b0, &to_z(w));
        let gw = if monotone {
            let mut acc = 0.0;
            let mut out = vec![0.0; gz.len()];
            for i in (0..gz.len()).rev() {
                acc += gz[i];
                out[i] = acc;
            }
            out
        } else {
            gz
        };
        (f, g0, gw)
    };
    let project = |b0: f64, w: &mut [f64]| -> f64 {
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        b0.max(BETA_MIN)
    };
    let mut x0 = m.xi2(1.0).max(m.h() * m.h() + m.xi1(1.0)).sqrt();
    let mut xw = vec![0.0; grid];
    let (mut fx, _, _) = value(x0, &xw);
    let (mut y0, mut yw) = (x0, xw.clone());
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut quiet = 0;
    for _ in 0..200_000 {
        let (fy, g0, gw) = value(y0, &yw);
        let (mut n0, mut nw);
        loop {
            n0 = y0 - g0 / lip;
            nw = yw.iter().zip(&gw).map(|(a, g)| a - g / lip).collect::<Vec<_>>();
            n0 = project(n0, &mut nw);
            let d0 = n0 - y0;
            let dsq: f64 = d0 * d0 + nw.iter().zip(&yw).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let lin: f64 = g0 * d0 + gw.iter().zip(nw.iter().zip(&yw)).map(|(g, (a, b))| g * (a - b)).sum::<f64>();
            let (fn_, _, _) = value(n0, &nw);
            if fn_.is_finite() && fn_ <= fy + lin + 0.5 * lip * dsq + 1e-15 * fy.abs() {
                break;
            }
            lip *= 2.0;
            if lip > 1e30 {
                return Err(Error::Numeric("spherical minimization failed to find a descent step".into()));
            }
        }
        let (fn_, _, _) = value(n0, &nw);
        if fn_ > fx {
            // restart momentum
            t = 1.0;
            y0 = x0;
            yw = xw.clone();
            lip *= 2.0;
            continue;
        }
        let improvement = fx - fn_;
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / tn;
        y0 = n0 + mom * (n0 - x0);
        yw = nw.iter().zip(&xw).map(|(a, b)| a + mom * (a - b)).collect();
        y0 = project(y0, &mut yw);
        x0 = n0;
        xw = nw;
        fx = fn_;
        t = tn;
        lip = (lip * 0.9).max(1e-12);
        if improvement < 1e-15 {
            quiet += 1;
            if quiet > 200 {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    Ok(fx)
}

/// Numerical ground-state value: infimum over nondecreasing step profiles.
pub fn opt_sp_numeric(m: &Mixture, grid: usize) -> Result<f64> {
    sp_numeric(m, grid, true)
}
