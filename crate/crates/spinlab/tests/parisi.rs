use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use spinlab::core_model::Mixture;
use spinlab::ensembles::{kappa, CorrelationLadder, OverlapLadder, TreeShape};
use spinlab::parisi::*;
use spinlab::Error;
use statrs::function::erf::erf;
use std::f64::consts::{PI, SQRT_2};

/// `E|mu + s Z|`.
fn folded_mean(mu: f64, s: f64) -> f64 {
    s * (2.0 / PI).sqrt() * (-mu * mu / (2.0 * s * s)).exp() + mu * erf(mu / (s * SQRT_2))
}

fn sk2() -> Mixture {
    Mixture::pure(2, 0.0).unwrap()
}

fn coarse(m: &Mixture) -> PdeGrid {
    PdeGrid::for_mixture(m).with_dx(0.04).unwrap()
}

fn two_level() -> (TreeShape, CorrelationLadder, OverlapLadder) {
    (
        TreeShape::new(vec![2, 2]).unwrap(),
        CorrelationLadder::new(vec![0.0, 0.4, 1.0]).unwrap(),
        OverlapLadder::new(vec![0.1, 0.5, 1.0]).unwrap(),
    )
}

// ---------------------------------------------------------------- spherical

#[test]
fn alg_sp_pure_and_boundary_values() {
    for p in [2u32, 4, 6, 8, 10] {
        let v = alg_sp(&Mixture::pure(p, 0.0).unwrap()).value;
        let expect = 2.0 * ((p as f64 - 1.0) / p as f64).sqrt();
        assert!((v - expect).abs() < 1e-10, "p={p}: {v}");
    }
    let a = alg_sp(&sk2());
    assert!((a.value - SQRT_2).abs() < 1e-14);
    assert_eq!(a.regime, Regime::ReplicaSymmetric);
}

#[test]
fn alg_sp_with_field_matches_variational_minimum() {
    let m = Mixture::pure(4, 1.0).unwrap();
    let a = alg_sp(&m);
    assert_eq!(a.regime, Regime::FullRsbTail);
    assert!(a.q_hat > 0.0 && a.q_hat < 1.0);
    let f = a.q_hat * m.xi2(a.q_hat) - m.xi1(a.q_hat) - 1.0;
    assert!(f.abs() < 1e-10);
    let direct = sp_numeric(&m, 200, false).unwrap();
    assert!((direct - a.value).abs() < 1e-3, "{direct} vs {}", a.value);
}

#[test]
fn parisi_sp_at_best_zeta_approaches_alg() {
    let m = Mixture::pure(4, 0.0).unwrap();
    let (b, z) = best_zeta_steps(&m, 1e-4, 400).unwrap();
    assert!((b - 12f64.sqrt()).abs() < 1e-12);
    let v = parisi_sp(b, &z, &m).unwrap();
    assert!((v - 3f64.sqrt()).abs() < 1e-3, "{v}");
}

#[test]
fn parisi_sp_rejects_infeasible_b() {
    let z = PiecewiseZeta::constant(2.0).unwrap();
    assert!(matches!(parisi_sp(1.0, &z, &sk2()), Err(Error::Domain(_))));
}

#[test]
fn opt_sp_examples() {
    assert!((opt_sp_numeric(&sk2(), 32).unwrap() - SQRT_2).abs() < 1e-3);
    let rs = Mixture::pure(4, 3.0).unwrap();
    assert!((opt_sp_numeric(&rs, 32).unwrap() - 13f64.sqrt()).abs() < 1e-3);
    assert!(matches!(opt_sp_numeric(&sk2(), 8), Err(Error::Argument(_))));
}

#[test]
fn opt_dominates_alg_on_random_mixtures() {
    let mut state = 12345u64;
    let mut next = || {
        state = spinlab::rng::mix64(state);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for i in 0..20 {
        let g2 = next();
        let g4 = next();
        let g6 = if i % 2 == 0 { next() } else { 0.0 };
        let h = 0.5 * next();
        let m = Mixture::new(&[(2, g2), (4, g4), (6, g6)], h).unwrap();
        let a = alg_sp(&m).value;
        let o = opt_sp_numeric(&m, 32).unwrap();
        assert!(o >= a - 1e-3, "mixture {i}: opt {o} < alg {a}");
    }
}

// ---------------------------------------------------------------- theta and cascades

#[test]
fn theta_derivative_matches_differences() {
    let m = Mixture::new(&[(2, 0.8), (4, 0.6)], 0.0).unwrap();
    let q0 = 0.2;
    let s = 1e-5;
    for q in [0.3, 0.55, 0.9] {
        let fd = (theta(&m, q0, q + s).unwrap() - theta(&m, q0, q - s).unwrap()) / (2.0 * s);
        assert!((fd - (q - q0) * m.xi2(q)).abs() < 1e-8);
    }
}

#[test]
fn cascade_examples() {
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.0).unwrap();
    let (shape, p, q) = two_level();
    let tiny = cascade_value(&shape, &p, &q, &[1e-12, 2e-12], &m).unwrap();
    assert!(tiny.abs() < 1e-10);

    let shape1 = TreeShape::new(vec![3]).unwrap();
    let p1 = CorrelationLadder::new(vec![0.0, 1.0]).unwrap();
    let q1 = OverlapLadder::new(vec![0.2, 1.0]).unwrap();
    let z0 = 0.4;
    let v = cascade_value(&shape1, &p1, &q1, &[z0], &m).unwrap();
    let expect = 1.5 * z0 * theta(&m, 0.2, 1.0).unwrap();
    assert!((v - expect).abs() < 1e-14);

    assert!(matches!(cascade_value(&shape, &p, &q, &[0.7, 0.3], &m), Err(Error::Argument(_))));
}

#[test]
fn logmoment_closed_form_examples() {
    let lam = DMatrix::from_row_slice(3, 3, &[3.0, 0.2, 0.1, 0.2, 2.5, 0.3, 0.1, 0.3, 2.0]);
    let sig = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.2, 0.4, 1.0, 0.3, 0.2, 0.3, 1.0]);
    let z = 0.7;
    let zero = DVector::zeros(3);
    let v = gaussian_quadratic_logmoment(&lam, &sig, z, &zero, &zero).unwrap();
    let shifted: DMatrix<f64> = &lam - &sig * z;
    let expect = (lam.determinant() / shifted.determinant()).ln() / (2.0 * z);
    assert!((v - expect).abs() < 1e-12);

    let one = |x: f64| DMatrix::from_element(1, 1, x);
    let s = gaussian_quadratic_logmoment(&one(2.0), &one(1.0), 1.0, &DVector::zeros(1), &DVector::from_element(1, 1.0)).unwrap();
    assert!((s - (0.5 + 0.5 * 2f64.ln())).abs() < 1e-14);

    let bad = gaussian_quadratic_logmoment(&one(1.0), &one(1.0), 2.0, &DVector::zeros(1), &DVector::zeros(1));
    assert!(matches!(bad, Err(Error::Domain(_))));
}

#[test]
fn lambda_recursion_without_zeta_stays_scalar() {
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.3).unwrap();
    let (shape, p, q) = two_level();
    let b = 3.0;
    let r = lambda_recursion(b, &[1e-300, 2e-300], &shape, &p, &q, &m, 0.2, 0.5).unwrap();
    let id = DMatrix::<f64>::identity(4, 4) * b;
    for l in &r.seq.lambdas {
        assert!((l - &id).abs().max() < 1e-12);
    }
    for w in r.seq.lambdas.windows(2) {
        let ratio = w[1].determinant().ln() - w[0].determinant().ln();
        assert!(ratio.abs() < 1e-12);
    }
    // Lambda = B I and tr M^d = K, so the zeta -> 0 increments telescope to xi'(1) - xi'(q_0)
    let field = m.h() + (0.5 - b) * 0.2;
    let expect = 2.0 * ((field * field + m.xi1(1.0)) / b - b * 0.04);
    assert!((r.value - expect).abs() < 1e-10, "{} vs {expect}", r.value);
}

#[test]
fn lambda_recursion_single_leaf_tracks_b_profile() {
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.0).unwrap();
    let shape = TreeShape::new(vec![1, 1]).unwrap();
    let p = CorrelationLadder::new(vec![0.0, 0.5, 1.0]).unwrap();
    let q = OverlapLadder::new(vec![0.0, 0.4, 1.0]).unwrap();
    let levels = [0.3, 0.6];
    let b = 4.0;
    let r = lambda_recursion(b, &levels, &shape, &p, &q, &m, 0.0, 0.0).unwrap();
    let z = PiecewiseZeta::new(vec![0.0, 0.4], levels.to_vec()).unwrap();
    for (d, &qd) in q.qs().iter().enumerate() {
        let expect = b_profile(b, &z, &m, qd);
        assert!((r.seq.lambdas[d][(0, 0)] - expect).abs() < 1e-12, "level {d}");
    }
}

#[test]
fn lambda_recursion_telescopes() {
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.1).unwrap();
    let (shape, p, q) = two_level();
    let b = 4.0;
    let r = lambda_recursion(b, &[0.2, 0.5], &shape, &p, &q, &m, 0.1, 0.3).unwrap();
    let ones = DVector::from_element(4, 1.0);
    let inv: Vec<DMatrix<f64>> = r.seq.lambdas.iter().map(|l| l.clone().try_inverse().unwrap()).collect();
    let sum: f64 = (0..inv.len() - 1).map(|d| ones.dot(&((&inv[d] - &inv[d + 1]) * &ones))).sum();
    let direct = ones.dot(&(&inv[0] * &ones)) - 4.0 / b;
    assert!((sum - direct).abs() < 1e-10);
    assert!(r.value <= r.bound + 1e-8);
}

#[test]
fn interpolation_bound_reduces_without_error_terms() {
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.0).unwrap();
    let (shape, p, q) = two_level();
    let under = PiecewiseZeta::new(vec![0.0], vec![0.1]).unwrap();
    let levels = [0.2, 0.5];
    let beta = 2.0;
    let b = 6.0;
    let comp = composite_zeta(&under, &levels, beta, &shape, &p, &q).unwrap();
    let main = 4.0 * parisi_sp(b, &comp, &m).unwrap();
    let bound = interpolation_bound_sp(BoundParams { b, beta, eta: 1e-9, c: 0.0, n: 10 }, &under, &levels, &shape, &p, &q, &m).unwrap();
    assert!((bound - main).abs() < 1e-12);

    // pointwise check of the composite on a grid
    for i in 0..50 {
        let t = i as f64 / 50.0;
        let expect = if t < 0.1 {
            0.1
        } else {
            let d = if t < 0.5 { 0 } else { 1 };
            beta * kappa(&shape, &p, &q, t).unwrap() * levels[d]
        };
        assert!((comp.eval(t) - expect).abs() < 1e-14, "t={t}");
    }

    let one = TreeShape::new(vec![1]).unwrap();
    let p1 = CorrelationLadder::new(vec![0.0, 1.0]).unwrap();
    let q1 = OverlapLadder::new(vec![0.1, 1.0]).unwrap();
    let params = BoundParams { b, beta, eta: 0.1, c: 1.0, n: 100 };
    let with_err = interpolation_bound_sp(params, &under, &[0.3], &one, &p1, &q1, &m).unwrap();
    let c1 = composite_zeta(&under, &[0.3], beta, &one, &p1, &q1).unwrap();
    let err = beta * 0.1 + b * 0.1 + 10f64.ln() / beta + 0.1;
    assert!((with_err - parisi_sp(b, &c1, &m).unwrap() - err).abs() < 1e-12);
}

// ---------------------------------------------------------------- PDE

#[test]
fn pde_folded_normal_cases() {
    let m = Mixture::new(&[(2, 0.8), (4, 0.4)], 0.6).unwrap();
    let g = PdeGrid::for_mixture(&m);
    let v = phi_value(&m, &PiecewiseZeta::zero(), 0.0, f64::INFINITY, m.h(), g).unwrap();
    assert!((v - folded_mean(0.6, m.xi1(1.0).sqrt())).abs() < 1e-5);

    let sk = sk2();
    let v = phi_value(&sk, &PiecewiseZeta::zero(), 0.0, f64::INFINITY, 0.0, PdeGrid::for_mixture(&sk)).unwrap();
    assert!((v - (2.0 / PI).sqrt() * SQRT_2).abs() < 1e-5);
    let pis = parisi_is(&PiecewiseZeta::zero(), &sk, PdeGrid::for_mixture(&sk)).unwrap();
    assert!((pis - 2.0 / PI.sqrt()).abs() < 1e-5);

    let far = Mixture::pure(2, 10.0).unwrap();
    let v = parisi_is(&PiecewiseZeta::zero(), &far, PdeGrid::for_mixture(&far)).unwrap();
    assert!((v - folded_mean(10.0, SQRT_2)).abs() < 1e-3);
}

#[test]
fn pde_terminal_slice_gap() {
    let m = sk2();
    let z = PiecewiseZeta::constant(0.5).unwrap();
    for beta in [2.0, 5.0] {
        let grid = PdeGrid::new(5.0, 0.04).unwrap();
        let fin = solve_parisi_pde(&m, &z, 0.3, beta, grid).unwrap();
        let inf = solve_parisi_pde(&m, &z, 0.3, f64::INFINITY, grid).unwrap();
        assert!(fin.xs().contains(&0.0));
        let last = fin.times().len() - 1;
        assert_eq!(fin.times()[last], 1.0);
        let gap = fin.phi_at(last, 0.0) - inf.phi_at(last, 0.0);
        assert!((gap - 2f64.ln() / beta).abs() < 1e-10);
    }
}

#[test]
fn pde_slices_are_convex_and_lipschitz() {
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.2).unwrap();
    let z = PiecewiseZeta::new(vec![0.0, 0.3, 0.7], vec![0.2, 1.5, 0.6]).unwrap();
    for a in [0.0, -0.5, 0.8] {
        let s = solve_parisi_pde(&m, &z, a, f64::INFINITY, coarse(&m)).unwrap();
        assert!(s.min_second_difference() >= -1e-8);
        assert!(s.max_slope() <= 1.0 + a.abs() + 1e-8);
    }
}

#[test]
fn pde_is_monotone_and_lipschitz_in_zeta() {
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.3).unwrap();
    let g = coarse(&m);
    let base = PiecewiseZeta::uniform(vec![0.1, 0.4, 0.4, 0.9]).unwrap();
    let phi = |z: &PiecewiseZeta| phi_value(&m, z, 0.0, f64::INFINITY, m.h(), g).unwrap();
    let p0 = phi(&base);
    for k in 0..10 {
        let bump: Vec<f64> = (0..4).map(|j| 0.3 * (((k * 7 + j * 3) % 5) as f64) / 4.0).collect();
        let other = base.add(&PiecewiseZeta::uniform(bump).unwrap());
        let p1 = phi(&other);
        assert!(p1 >= p0 - 1e-9, "trial {k}");
        assert!(p1 - p0 <= base.l1_distance_xi2(&other, &m) + 2e-6, "trial {k}");
    }
}

#[test]
fn pde_temperature_gap_is_bounded() {
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.3).unwrap();
    let z = PiecewiseZeta::uniform(vec![0.3, 0.8]).unwrap();
    let g = coarse(&m);
    let inf = phi_value(&m, &z, 0.0, f64::INFINITY, m.h(), g).unwrap();
    for beta in [4.0, 8.0, 16.0, 32.0] {
        let fin = phi_value(&m, &z, 0.0, beta, m.h(), g).unwrap();
        assert!(fin >= inf - 1e-5 && fin - inf <= 2f64.ln() / beta + 1e-5, "beta {beta}");
    }
}

#[test]
fn shift_identity_examples() {
    let sk = sk2();
    let g = PdeGrid::for_mixture(&sk);
    let z = PiecewiseZeta::uniform(vec![0.4, 1.2]).unwrap();
    assert!(shift_identity_check(&sk, &z, 0.0, 0.1, g).unwrap() < 1e-12);
    assert!(shift_identity_check(&sk, &PiecewiseZeta::zero(), 1.0, 0.0, g).unwrap() <= 1e-5);
    let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.0).unwrap();
    let r = shift_identity_check(&m, &z, -0.6, 0.3, PdeGrid::for_mixture(&m)).unwrap();
    assert!(r <= 5e-6, "{r}");
}

#[test]
fn alg_is_never_exceeds_zero_profile() {
    let m = Mixture::new(&[(2, 0.5), (4, 0.4)], 0.1).unwrap();
    let g = PdeGrid::for_mixture(&m).with_dx(0.05).unwrap();
    let r = alg_is_profile(&m, 8, g).unwrap();
    assert!(r.value <= parisi_is(&PiecewiseZeta::zero(), &m, g).unwrap() + 1e-9);
    assert!(r.sweeps >= 3);
    assert!(matches!(alg_is_numeric(&m, 4, g), Err(Error::Argument(_))));
}

// ---------------------------------------------------------------- increasify

#[test]
fn increasify_sp_reconstructs_best_zeta() {
    let m = Mixture::pure(4, 0.0).unwrap();
    let (_, target) = best_zeta_steps(&m, 0.2, 6).unwrap();
    let pos = PiecewiseZeta::new(target.breakpoints().to_vec(), target.values().iter().map(|v| v.max(0.05)).collect()).unwrap();
    assert!(!pos.is_monotone());
    let id = |x: f64| x;
    let r = increasify_sp(&pos, 0.05, 0.0, &id, 40.0).unwrap();
    for (d, &qd) in r.q.qs()[..r.q.depth()].iter().enumerate() {
        let lhs = r.beta * kappa(&r.shape, &r.p, &r.q, qd).unwrap() * r.levels[d];
        let rhs = r.perturbed.eval(qd);
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0), "knot {d}: {lhs} vs {rhs}");
    }
    assert!(r.levels.windows(2).all(|w| w[0] < w[1]));
    assert!(r.levels[0] > 0.0 && *r.levels.last().unwrap() < 1.0);
}

#[test]
fn increasify_is_uniform_arms() {
    let id = |x: f64| x;
    let t = PiecewiseZeta::constant(2.0).unwrap();
    let r = increasify_is(&t, 4.0, 0.5, 0.0, &id).unwrap();
    assert_eq!(r.k_star, 16);
    assert_eq!(r.shape.num_leaves(), 16usize.pow(r.shape.depth() as u32));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cascade_closed_form_matches_integral(
        g2 in 0.1f64..1.0, g4 in 0.0f64..1.0,
        q0 in 0.0f64..0.3, q1 in 0.35f64..0.9,
        p1 in 0.0f64..1.0, k1 in 1usize..4, k2 in 1usize..4,
        z0 in 0.05f64..0.45, z1 in 0.5f64..0.95,
    ) {
        let m = Mixture::new(&[(2, g2), (4, g4)], 0.0).unwrap();
        let shape = TreeShape::new(vec![k1, k2]).unwrap();
        let p = CorrelationLadder::new(vec![0.0, p1, 1.0]).unwrap();
        let q = OverlapLadder::new(vec![q0, q1, 1.0]).unwrap();
        let a = cascade_value(&shape, &p, &q, &[z0, z1], &m).unwrap();
        let b = cascade_integral(&shape, &p, &q, &[z0, z1], &m).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn increasify_is_reconstructs_random_targets(
        vals in prop::collection::vec(0.0f64..3.0, 1..6),
        q0 in 0.0f64..0.5,
    ) {
        let id = |x: f64| x;
        let t = PiecewiseZeta::uniform(vals).unwrap();
        let beta = 2.0;
        let delta = 0.25;
        let r = increasify_is(&t, beta, delta, q0, &id).unwrap();
        prop_assert!(r.levels.windows(2).all(|w| w[0] <= w[1]));
        for (d, &qd) in r.q.qs()[..r.q.depth()].iter().enumerate() {
            let lhs = beta * kappa(&r.shape, &r.p, &r.q, qd).unwrap() * r.levels[d];
            prop_assert!((lhs - r.clamped[d]).abs() <= 1e-12 * r.clamped[d].max(1.0));
            prop_assert!(r.clamped[d] >= delta - 1e-15 && r.clamped[d] <= beta + 1e-15);
        }
    }

    #[test]
    fn b_profile_is_nondecreasing_in_t(c in 0.0f64..2.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let m = Mixture::new(&[(2, 0.7), (4, 0.5)], 0.0).unwrap();
        let z = PiecewiseZeta::uniform(vec![c, 0.5 * c, 2.0 * c]).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(b_profile(5.0, &z, &m, lo) <= b_profile(5.0, &z, &m, hi) + 1e-14);
    }
}
