use crate::core_model::Mixture;
use crate::error::{arg, Result};
use serde::{Deserialize, Serialize};

/// Right-continuous step function on `[0, 1)`.
///
/// `values[i]` holds on `[breakpoints[i], breakpoints[i + 1])`, the last
/// piece running up to 1. `breakpoints[0]` is always 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseZeta {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseZeta {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return arg("zeta needs one value per breakpoint");
        }
        if breakpoints[0] != 0.0 {
            return arg("first zeta breakpoint must be 0");
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) || *breakpoints.last().unwrap() >= 1.0 {
            return arg(format!("zeta breakpoints must increase within [0, 1): {breakpoints:?}"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return arg(format!("zeta values must be finite and nonnegative: {values:?}"));
        }
        Ok(PiecewiseZeta { breakpoints, values })
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![c])
    }

    pub fn zero() -> Self {
        PiecewiseZeta { breakpoints: vec![0.0], values: vec![0.0] }
    }

    /// Steps on the uniform grid `j / n`.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new((0..n).map(|j| j as f64 / n as f64).collect(), values)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Membership in the nondecreasing class.
    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }

    fn end(&self, i: usize) -> f64 {
        self.breakpoints.get(i + 1).copied().unwrap_or(1.0)
    }

    /// Pieces as `(start, end, value)`.
    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.values.len()).map(move |i| (self.breakpoints[i], self.end(i), self.values[i]))
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.breakpoints.partition_point(|&b| b <= t);
        self.values[i.saturating_sub(1)]
    }

    /// Left limit `zeta(t-)`; equals `zeta(0)` at `t = 0`.
    pub fn eval_left(&self, t: f64) -> f64 {
        let i = self.breakpoints.partition_point(|&b| b < t);
        self.values[i.saturating_sub(1)]
    }

    /// Points where the value actually changes.
    pub fn jumps(&self) -> Vec<f64> {
        (1..self.values.len())
            .filter(|&i| self.values[i] != self.values[i - 1])
            .map(|i| self.breakpoints[i])
            .collect()
    }

    /// `int_a^b xi''(t) zeta(t) dt`, exact.
    pub fn integral_xi2(&self, m: &Mixture, a: f64, b: f64) -> f64 {
        self.pieces()
            .map(|(s, e, v)| {
                let (lo, hi) = (s.max(a), e.min(b));
                if hi > lo {
                    v * (m.xi1(hi) - m.xi1(lo))
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// `int_a^b t xi''(t) zeta(t) dt`, exact.
    pub fn integral_t_xi2(&self, m: &Mixture, a: f64, b: f64) -> f64 {
        let anti = |t: f64| t * m.xi1(t) - m.xi(t);
        self.pieces()
            .map(|(s, e, v)| {
                let (lo, hi) = (s.max(a), e.min(b));
                if hi > lo {
                    v * (anti(hi) - anti(lo))
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// `int_0^1 xi'' |zeta - other|`, exact.
    pub fn l1_distance_xi2(&self, other: &PiecewiseZeta, m: &Mixture) -> f64 {
        let mut knots: Vec<f64> = self.breakpoints.iter().chain(&other.breakpoints).copied().collect();
        knots.push(1.0);
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        knots
            .windows(2)
            .map(|w| (self.eval(w[0]) - other.eval(w[0])).abs() * (m.xi1(w[1]) - m.xi1(w[0])))
            .sum()
    }

    /// Pointwise sum.
    pub fn add(&self, other: &PiecewiseZeta) -> PiecewiseZeta {
        let mut knots: Vec<f64> = self.breakpoints.iter().chain(&other.breakpoints).copied().collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let values = knots.iter().map(|&t| self.eval(t) + other.eval(t)).collect();
        PiecewiseZeta { breakpoints: knots, values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_and_limits() {
        let z = PiecewiseZeta::new(vec![0.0, 0.25, 0.5], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(z.eval(0.25), 3.0);
        assert_eq!(z.eval_left(0.25), 1.0);
        assert_eq!(z.eval(0.99), 2.0);
        assert!(!z.is_monotone());
        assert_eq!(z.jumps(), vec![0.25, 0.5]);
        let m = Mixture::pure(2, 0.0).unwrap();
        assert!((z.integral_xi2(&m, 0.0, 1.0) - (0.5 + 1.5 + 2.0)).abs() < 1e-14);
    }
}
