//! Quadrature helpers on top of `gauss-quad`.

use gauss_quad::hermite::GaussHermite;
use gauss_quad::legendre::GaussLegendre;
use std::num::NonZeroUsize;
use std::sync::OnceLock;

/// Default absolute tolerance for adaptive integration.
pub const ABS_TOL: f64 = 1e-10;

const PANEL: usize = 12;
const MAX_DEPTH: u32 = 40;

fn panel_rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        GaussLegendre::new(NonZeroUsize::new(PANEL).unwrap())
            .iter()
            .map(|(x, w)| (*x, *w))
            .collect()
    })
}

fn panel<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    panel_rule().iter().map(|&(x, w)| w * f(c + r * x)).sum::<f64>() * r
}

fn refine<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let left = panel(f, a, m);
    let right = panel(f, m, b);
    let halves = left + right;
    if (halves - whole).abs() <= tol || depth >= MAX_DEPTH {
        return halves;
    }
    refine(f, a, m, left, 0.5 * tol, depth + 1) + refine(f, m, b, right, 0.5 * tol, depth + 1)
}

/// Adaptive Gauss–Legendre integral of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let whole = panel(&mut f, a, b);
    refine(&mut f, a, b, whole, tol, 0)
}

/// Integral over `[a, b]` split at `cuts` (points outside the interval are ignored).
pub fn integrate_pieces<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, cuts: &[f64], tol: f64) -> f64 {
    let mut knots = vec![a];
    knots.extend(cuts.iter().copied().filter(|&c| c > a && c < b));
    knots.push(b);
    knots.windows(2).map(|w| integrate(&mut f, w[0], w[1], tol)).sum()
}

/// Gauss–Hermite rule rescaled for expectations under a standard normal.
#[derive(Debug, Clone)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn new(n: usize) -> Self {
        let gh = GaussHermite::new(NonZeroUsize::new(n.max(1)).unwrap());
        let s = std::f64::consts::PI.sqrt();
        let (nodes, weights) = gh
            .iter()
            .map(|(x, w)| (x * std::f64::consts::SQRT_2, w / s))
            .unzip();
        NormalRule { nodes, weights }
    }

    /// `E f(Z)` for `Z ~ N(0,1)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }
}
