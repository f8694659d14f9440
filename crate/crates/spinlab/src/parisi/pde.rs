use super::zeta::PiecewiseZeta;
use crate::core_model::Mixture;
use crate::error::{arg, Error, Result};
use crate::quad::{self, NormalRule};
use serde::Serialize;

/// Spatial grid and quadrature settings for the Parisi PDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PdeGrid {
    /// Half-width `L` of the spatial window `[-L, L]`.
    pub half_width: f64,
    pub dx: f64,
    /// Gauss–Hermite nodes per step.
    pub nodes: usize,
    /// Re-solve with doubled nodes and compare `Phi(0, h)`.
    pub self_check: bool,
}

pub const SELF_CHECK_TOL: f64 = 1e-6;
const MIN_NODES: usize = 64;
/// Substeps never carry more than this fraction of `xi'(1)`.
const SUBSTEP_FRACTION: f64 = 1.0 / 48.0;
/// Bound on `(c (1 + |a|))^2` times the substep variance.
const TILT_LIMIT: f64 = 4.0;

impl PdeGrid {
    pub fn new(half_width: f64, dx: f64) -> Result<Self> {
        if !(half_width > 0.0 && dx > 0.0) || dx > 0.01 * half_width + 1e-15 {
            return arg(format!("need 0 < dx <= 0.01 L, got L = {half_width}, dx = {dx}"));
        }
        Ok(PdeGrid { half_width, dx, nodes: MIN_NODES, self_check: true })
    }

    /// `L = |h| + 6 sqrt(xi'(1)) + 2`, `dx = min(0.01 L, 0.02)`.
    pub fn for_mixture(m: &Mixture) -> Self {
        let l = m.h().abs() + 6.0 * m.xi1(1.0).sqrt() + 2.0;
        PdeGrid { half_width: l, dx: (0.01 * l).min(0.02), nodes: MIN_NODES, self_check: true }
    }

    pub fn with_dx(self, dx: f64) -> Result<Self> {
        let g = PdeGrid::new(self.half_width, dx)?;
        Ok(PdeGrid { nodes: self.nodes, self_check: self.self_check, ..g })
    }

    pub fn without_check(mut self) -> Self {
        self.self_check = false;
        self
    }

    fn points(&self) -> usize {
        (2.0 * self.half_width / self.dx).round() as usize
    }
}

/// Natural cubic spline on a uniform grid, linear outside it.
#[derive(Debug, Clone)]
struct Spline {
    x0: f64,
    dx: f64,
    y: Vec<f64>,
    m2: Vec<f64>,
    left_slope: f64,
    right_slope: f64,
}

impl Spline {
    fn new(x0: f64, dx: f64, y: Vec<f64>, left_slope: f64, right_slope: f64) -> Self {
        let n = y.len() - 1;
        let mut m2 = vec![0.0; n + 1];
        if n >= 2 {
            // Thomas algorithm for M_{i-1} + 4 M_i + M_{i+1} = 6 d2y_i / dx^2
            let k = 6.0 / (dx * dx);
            let mut cp = vec![0.0; n];
            let mut dp = vec![0.0; n];
            for i in 1..n {
                let rhs = k * (y[i + 1] - 2.0 * y[i] + y[i - 1]);
                let denom = 4.0 - if i > 1 { cp[i - 1] } else { 0.0 };
                cp[i] = 1.0 / denom;
                dp[i] = (rhs - if i > 1 { dp[i - 1] } else { 0.0 }) / denom;
            }
            for i in (1..n).rev() {
                m2[i] = dp[i] - cp[i] * m2[i + 1];
            }
        }
        Spline { x0, dx, y, m2, left_slope, right_slope }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.y.len() - 1;
        let s = (x - self.x0) / self.dx;
        if s <= 0.0 {
            return self.y[0] + self.left_slope * (x - self.x0);
        }
        if s >= n as f64 {
            return self.y[n] + self.right_slope * (x - self.x0 - n as f64 * self.dx);
        }
        let i = (s.floor() as usize).min(n - 1);
        let u = s - i as f64;
        let v = 1.0 - u;
        let h2 = self.dx * self.dx / 6.0;
        v * self.y[i] + u * self.y[i + 1] + h2 * ((v * v * v - v) * self.m2[i] + (u * u * u - u) * self.m2[i + 1])
    }
}

/// `beta^-1 log(2 cosh(beta x)) - a x`, or `|x| - a x` at `beta = inf`.
pub fn terminal(a: f64, beta: f64, x: f64) -> f64 {
    let base = if beta.is_infinite() { x.abs() } else { x.abs() + (-2.0 * beta * x.abs()).exp().ln_1p() / beta };
    base - a * x
}

struct Stepper<'a> {
    m: &'a Mixture,
    a: f64,
    beta: f64,
    grid: PdeGrid,
    xs: Vec<f64>,
    rule: NormalRule,
}

#[derive(Clone)]
enum Slice {
    Terminal,
    Grid(Spline),
}

impl<'a> Stepper<'a> {
    fn new(m: &'a Mixture, a: f64, beta: f64, grid: PdeGrid) -> Self {
        let n = grid.points();
        let xs = (0..=n).map(|i| -grid.half_width + i as f64 * grid.dx).collect();
        Stepper { m, a, beta, grid, xs, rule: NormalRule::new(grid.nodes.max(MIN_NODES)) }
    }

    fn wrap(&self, y: Vec<f64>) -> Spline {
        Spline::new(self.xs[0], self.grid.dx, y, -1.0 - self.a, 1.0 - self.a)
    }

    fn terminal_grid(&self) -> Vec<f64> {
        self.xs.iter().map(|&x| terminal(self.a, self.beta, x)).collect()
    }

    fn eval(&self, s: &Slice, x: f64) -> f64 {
        match s {
            Slice::Terminal => terminal(self.a, self.beta, x),
            Slice::Grid(sp) => sp.eval(x),
        }
    }

    fn values(&self, s: &Slice) -> Vec<f64> {
        match s {
            Slice::Terminal => self.terminal_grid(),
            Slice::Grid(sp) => sp.y.clone(),
        }
    }

    /// One Cole–Hopf (or heat, at `c = 0`) step of variance `var`.
    fn step(&self, prev: &Slice, c: f64, var: f64) -> Slice {
        let sigma = var.sqrt();
        let y: Vec<f64> = match prev {
            Slice::Terminal => self.xs.iter().map(|&x| self.terminal_step(x, c, sigma)).collect(),
            Slice::Grid(sp) => {
                let rule = &self.rule;
                let mut buf = vec![0.0; rule.nodes.len()];
                self.xs
                    .iter()
                    .map(|&x| {
                        if c == 0.0 {
                            return rule.expect(|z| sp.eval(x + sigma * z));
                        }
                        let mut top = f64::NEG_INFINITY;
                        for (b, z) in buf.iter_mut().zip(&rule.nodes) {
                            *b = c * sp.eval(x + sigma * z);
                            top = top.max(*b);
                        }
                        let s: f64 = buf.iter().zip(&rule.weights).map(|(b, w)| w * (b - top).exp()).sum();
                        (top + s.ln()) / c
                    })
                    .collect()
            }
        };
        Slice::Grid(self.wrap(y))
    }

    /// Exact-terminal step by adaptive quadrature split at the kink.
    fn terminal_step(&self, x: f64, c: f64, sigma: f64) -> f64 {
        let (a, beta) = (self.a, self.beta);
        let f0x = terminal(a, beta, x);
        let zmax = 12.0 + c * (1.0 + a.abs()) * sigma;
        let kink = if sigma > 0.0 { (-x / sigma).clamp(-zmax, zmax) } else { 0.0 };
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cuts = [kink];
        if c == 0.0 {
            quad::integrate_pieces(|z| phi(z) * terminal(a, beta, x + sigma * z), -zmax, zmax, &cuts, 1e-12)
        } else {
            let i = quad::integrate_pieces(
                |z| phi(z) * (c * (terminal(a, beta, x + sigma * z) - f0x)).exp(),
                -zmax,
                zmax,
                &cuts,
                1e-13,
            );
            f0x + i.ln() / c
        }
    }

    fn substeps(&self, c: f64, var: f64) -> usize {
        let total = self.m.xi1(1.0);
        let by_var = (var / (total * SUBSTEP_FRACTION)).ceil();
        let tilt = c * (1.0 + self.a.abs());
        let by_tilt = (tilt * tilt * var / TILT_LIMIT).ceil();
        (by_var.max(by_tilt).max(1.0)) as usize
    }

    /// Solve backward across `[s, e)` with constant `c`, recording substep slices.
    fn piece(&self, start: Slice, s: f64, e: f64, c: f64, record: &mut Option<&mut Vec<(f64, Slice)>>) -> Slice {
        let (v0, v1) = (self.m.xi1(s), self.m.xi1(e));
        let var = v1 - v0;
        if !(var > 0.0) {
            if let Some(r) = record.as_deref_mut() {
                r.push((s, start.clone()));
            }
            return start;
        }
        let n = self.substeps(c, var);
        let mut cur = start;
        for j in (0..n).rev() {
            cur = self.step(&cur, c, var / n as f64);
            if let Some(r) = record.as_deref_mut() {
                let t = if j == 0 { s } else { invert_xi1(self.m, v0 + var * j as f64 / n as f64, s, e) };
                r.push((t, cur.clone()));
            }
        }
        cur
    }

    fn solve(&self, zeta: &PiecewiseZeta, mut record: Option<&mut Vec<(f64, Slice)>>) -> Slice {
        let pieces: Vec<_> = zeta.pieces().collect();
        let mut cur = Slice::Terminal;
        for &(s, e, c) in pieces.iter().rev() {
            cur = self.piece(cur, s, e, c, &mut record);
        }
        cur
    }
}

fn invert_xi1(m: &Mixture, target: f64, lo: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if m.xi1(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Backward solution of the Parisi PDE on the spatial grid.
#[derive(Debug, Clone)]
pub struct PdeSolution {
    times: Vec<f64>,
    slices: Vec<Spline>,
    pub a: f64,
    pub beta: f64,
    pub zeta: PiecewiseZeta,
    pub mixture: Mixture,
    pub grid: PdeGrid,
}

impl PdeSolution {
    /// Stored times, increasing, from 0 to 1.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn xs(&self) -> Vec<f64> {
        let sp = &self.slices[0];
        (0..sp.y.len()).map(|i| sp.x0 + i as f64 * sp.dx).collect()
    }

    /// Grid values at stored time index `k`.
    pub fn values(&self, k: usize) -> &[f64] {
        &self.slices[k].y
    }

    /// `Phi(times[k], x)`; spline inside the window, linear outside.
    pub fn phi_at(&self, k: usize, x: f64) -> f64 {
        self.slices[k].eval(x)
    }

    pub fn phi0(&self, x: f64) -> f64 {
        self.slices[0].eval(x)
    }

    /// Most negative discrete second difference over all slices.
    pub fn min_second_difference(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.y.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest discrete slope magnitude over all slices.
    pub fn max_slope(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.y.windows(2).map(|w| ((w[1] - w[0]) / s.dx).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }
}

fn check_inputs(a: f64, beta: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&a) {
        return arg(format!("a must lie in [-1, 1], got {a}"));
    }
    if !(beta > 0.0) {
        return arg(format!("beta must be positive or infinite, got {beta}"));
    }
    Ok(())
}

/// Solve `d_t Phi + xi''/2 (Phi_xx + zeta Phi_x^2) = 0` backward from the terminal condition.
pub fn solve_parisi_pde(m: &Mixture, zeta: &PiecewiseZeta, a: f64, beta: f64, grid: PdeGrid) -> Result<PdeSolution> {
    check_inputs(a, beta)?;
    PdeGrid::new(grid.half_width, grid.dx)?;
    let st = Stepper::new(m, a, beta, grid);
    let mut rec = Vec::new();
    st.solve(zeta, Some(&mut rec));
    if grid.self_check {
        let fine = Stepper::new(m, a, beta, PdeGrid { nodes: 2 * st.rule.nodes.len(), ..grid });
        let coarse_v = match &rec.last().map(|r| &r.1) {
            Some(s) => st.eval(s, m.h()),
            None => terminal(a, beta, m.h()),
        };
        let fine_v = fine.eval(&fine.solve(zeta, None), m.h());
        if (coarse_v - fine_v).abs() > SELF_CHECK_TOL {
            return Err(Error::Numeric(format!(
                "quadrature self-check failed: Phi(0, h) moved by {:e} when doubling nodes",
                (coarse_v - fine_v).abs()
            )));
        }
    }
    let mut times = vec![1.0];
    let mut slices = vec![st.wrap(st.terminal_grid())];
    for (t, s) in rec {
        times.push(t);
        slices.push(match s {
            Slice::Grid(sp) => sp,
            Slice::Terminal => st.wrap(st.values(&Slice::Terminal)),
        });
    }
    times.reverse();
    slices.reverse();
    Ok(PdeSolution { times, slices, a, beta, zeta: zeta.clone(), mixture: m.clone(), grid })
}

/// `Phi(0, h)` alone.
pub fn phi_value(m: &Mixture, zeta: &PiecewiseZeta, a: f64, beta: f64, x: f64, grid: PdeGrid) -> Result<f64> {
    Ok(solve_parisi_pde(m, zeta, a, beta, grid)?.phi0(x))
}

/// `P(zeta) = Phi(0, h) - 1/2 int t xi'' zeta` at zero temperature.
pub fn parisi_is(zeta: &PiecewiseZeta, m: &Mixture, grid: PdeGrid) -> Result<f64> {
    let phi = phi_value(m, zeta, 0.0, f64::INFINITY, m.h(), grid)?;
    Ok(phi - 0.5 * zeta.integral_t_xi2(m, 0.0, 1.0))
}

/// `|Phi(0, y) - a y - Phi_a(0, x) - a^2/2 int xi'' zeta|` with `y = x - a int xi'' zeta`.
pub fn shift_identity_check(m: &Mixture, zeta: &PiecewiseZeta, a: f64, x: f64, grid: PdeGrid) -> Result<f64> {
    let j = zeta.integral_xi2(m, 0.0, 1.0);
    let y = x - a * j;
    let plain = phi_value(m, zeta, 0.0, f64::INFINITY, y, grid)?;
    let tilted = phi_value(m, zeta, a, f64::INFINITY, x, grid)?;
    Ok((plain - a * y - tilted - 0.5 * a * a * j).abs())
}

/// Coordinate-descent state for the zero-temperature functional on a uniform grid.
struct Descent<'a> {
    st: Stepper<'a>,
    knots: usize,
    /// `anti(t_{j+1}) - anti(t_j)` for `anti(t) = t xi'(t) - xi(t)`.
    weights: Vec<f64>,
    values: Vec<f64>,
    evals: usize,
}

impl<'a> Descent<'a> {
    fn new(m: &'a Mixture, knots: usize, grid: PdeGrid, values: Vec<f64>) -> Self {
        let anti = |t: f64| t * m.xi1(t) - m.xi(t);
        let weights = (0..knots)
            .map(|j| anti((j + 1) as f64 / knots as f64) - anti(j as f64 / knots as f64))
            .collect();
        Descent { st: Stepper::new(m, 0.0, f64::INFINITY, grid), knots, weights, values, evals: 0 }
    }

    fn bounds(&self, j: usize) -> (f64, f64) {
        (j as f64 / self.knots as f64, (j + 1) as f64 / self.knots as f64)
    }

    fn correction(&self, values: &[f64]) -> f64 {
        0.5 * values.iter().zip(&self.weights).map(|(v, w)| v * w).sum::<f64>()
    }

    /// Objective with cell `j` set to `v`, starting from the slice at `t_{j+1}`.
    fn objective_from(&mut self, above: &Slice, j: usize, v: f64) -> f64 {
        self.evals += 1;
        let (s, e) = self.bounds(j);
        let mut cur = self.st.piece(above.clone(), s, e, v, &mut None);
        for i in (0..j).rev() {
            let (s, e) = self.bounds(i);
            cur = self.st.piece(cur, s, e, self.values[i], &mut None);
        }
        let old = self.values[j];
        self.values[j] = v;
        let corr = self.correction(&self.values);
        self.values[j] = old;
        self.st.eval(&cur, self.st.m.h()) - corr
    }

    fn objective(&mut self) -> f64 {
        let top = self.knots - 1;
        let v = self.values[top];
        self.objective_from(&Slice::Terminal, top, v)
    }

    /// One top-down sweep; returns the objective afterwards.
    fn sweep(&mut self, mut current: f64) -> f64 {
        let mut above = Slice::Terminal;
        for j in (0..self.knots).rev() {
            let (best_v, best_f) = self.line_search(&above, j, current);
            self.values[j] = best_v;
            current = best_f;
            let (s, e) = self.bounds(j);
            above = self.st.piece(above, s, e, best_v, &mut None);
        }
        current
    }

    /// Bracket by doubling, then golden section.
    fn line_search(&mut self, above: &Slice, j: usize, f_cur: f64) -> (f64, f64) {
        let v_cur = self.values[j];
        let mut pts: Vec<(f64, f64)> = vec![(v_cur, f_cur)];
        let push = |this: &mut Self, v: f64, pts: &mut Vec<(f64, f64)>| {
            if pts.iter().all(|p| (p.0 - v).abs() > 1e-12) {
                let f = this.objective_from(above, j, v);
                pts.push((v, f));
            }
        };
        push(self, 0.0, &mut pts);
        let mut v = 0.125;
        let mut rises = 0;
        let mut last = pts.iter().find(|p| p.0 == 0.0).map(|p| p.1).unwrap_or(f_cur);
        while v <= 1024.0 {
            push(self, v, &mut pts);
            let f = pts.iter().find(|p| (p.0 - v).abs() <= 1e-12).unwrap().1;
            if f > last {
                rises += 1;
                if rises >= 2 && v > v_cur {
                    break;
                }
            } else {
                rises = 0;
            }
            last = f;
            v *= 2.0;
        }
        pts.sort_by(|x, y| x.0.total_cmp(&y.0));
        let b = (0..pts.len()).min_by(|&x, &y| pts[x].1.total_cmp(&pts[y].1)).unwrap();
        let lo = if b == 0 { pts[0].0 } else { pts[b - 1].0 };
        let hi = if b + 1 == pts.len() { pts[b].0 } else { pts[b + 1].0 };
        let mut best = pts[b];
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut c) = (lo, hi);
        let mut x1 = c - g * (c - a);
        let mut x2 = a + g * (c - a);
        let mut f1 = self.objective_from(above, j, x1);
        let mut f2 = self.objective_from(above, j, x2);
        while c - a > 1e-4 * (1.0 + best.0) {
            if f1 < f2 {
                c = x2;
                x2 = x1;
                f2 = f1;
                x1 = c - g * (c - a);
                f1 = self.objective_from(above, j, x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (c - a);
                f2 = self.objective_from(above, j, x2);
            }
        }
        for cand in [(x1, f1), (x2, f2)] {
            if cand.1 < best.1 {
                best = cand;
            }
        }
        best
    }
}

pub const ALG_IS_TOL: f64 = 1e-6;
const MIN_SWEEPS: usize = 3;
const MAX_SWEEPS: usize = 40;

#[derive(Debug, Clone, Serialize)]
pub struct AlgIsResult {
    pub value: f64,
    pub zeta: PiecewiseZeta,
    pub sweeps: usize,
    pub evaluations: usize,
}

/// Zero-temperature algorithmic threshold by coordinate descent over
/// nonnegative step profiles on `knots` uniform cells.
///
/// Starts: zero, constant 1, `1 / (sqrt(xi''(1)) (1 - t))`, and, when
/// `knots / 2 >= 8` is a whole number, the refined optimum for `knots / 2`.
/// Each start gets one sweep; the best continues until a sweep improves the
/// value by less than `1e-6` (at least three sweeps in total).
pub fn alg_is_numeric(m: &Mixture, knots: usize, grid: PdeGrid) -> Result<f64> {
    Ok(alg_is_profile(m, knots, grid)?.value)
}

pub fn alg_is_profile(m: &Mixture, knots: usize, grid: PdeGrid) -> Result<AlgIsResult> {
    if knots < 8 {
        return arg("knots must be at least 8");
    }
    PdeGrid::new(grid.half_width, grid.dx)?;
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; knots], vec![1.0; knots]];
    let s2 = m.xi2(1.0).sqrt().max(1e-12);
    starts.push((0..knots).map(|j| 1.0 / (s2 * (1.0 - (j as f64 + 0.5) / knots as f64))).collect());
    if knots.is_multiple_of(2) && knots / 2 >= 8 {
        let coarse = alg_is_profile(m, knots / 2, grid)?;
        starts.push(coarse.zeta.values().iter().flat_map(|&v| [v, v]).collect());
    }
    let grid = grid.without_check();
    let mut evaluations = 0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in starts {
        let mut d = Descent::new(m, knots, grid, s);
        let f0 = d.objective();
        let f1 = d.sweep(f0);
        evaluations += d.evals;
        if best.as_ref().is_none_or(|b| f1 < b.0) {
            best = Some((f1, d.values.clone()));
        }
    }
    let (mut value, values) = best.unwrap();
    let mut d = Descent::new(m, knots, grid, values);
    let mut sweeps = 1;
    while sweeps < MAX_SWEEPS {
        let next = d.sweep(value);
        sweeps += 1;
        let gain = value - next;
        value = next.min(value);
        if sweeps >= MIN_SWEEPS && gain < ALG_IS_TOL {
            break;
        }
    }
    evaluations += d.evals;
    let zeta = PiecewiseZeta::uniform(d.values)?;
    Ok(AlgIsResult { value, zeta, sweeps, evaluations })
}
