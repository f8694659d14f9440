use nalgebra::DMatrix;
use spinlab::core_model::*;
use spinlab::ensembles::{pair_correlated, sample_ensemble, target_overlap_matrix, CorrelationLadder, OverlapLadder, TreeShape};
use spinlab::ogp_lab::*;
use spinlab::optimizers::{gradient_ascent, Region};
use spinlab::rng::{self, label};
use spinlab::Result;

fn constant(c: Point) -> impl Fn(&Hamiltonian, u64) -> Result<Point> + Sync {
    move |_: &Hamiltonian, _: u64| Ok(c.clone())
}

/// First column of the degree-2 coefficient array, a fixed linear map of the disorder.
fn linear(h: &Hamiltonian, _: u64) -> Result<Point> {
    let n = h.n();
    let d = &h.tensors()[0].data;
    Ok(Point::from_fn(n, |i, _| d[i * n] / 2.0))
}

fn ga(h: &Hamiltonian, s: u64) -> Result<Point> {
    let x0 = random_on_sphere(h.n(), 0.5, &mut rng::stream(s, &[label::INIT]));
    Ok(gradient_ascent(h, &x0, 10, &[0.2], Region::Ball(1.0))?.output)
}

fn sk() -> Mixture {
    Mixture::pure(2, 0.0).unwrap()
}

fn top_half(h: &Hamiltonian) -> f64 {
    let n = h.n();
    let g = DMatrix::from_row_slice(n, n, &h.tensors()[0].data);
    ((&g + g.transpose()) / (n as f64).sqrt()).symmetric_eigen().eigenvalues.max() / 2.0
}

fn grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

#[test]
fn constant_algorithm_has_flat_chi() {
    let c = Point::from_fn(16, |i, _| if i % 2 == 0 { 0.7 } else { -0.7 });
    let alg = constant(c.clone());
    let cfg = ChiConfig { n: 16, p_grid: grid(), reps: 12, seed: 1, swap: false };
    let est = estimate_chi(&alg, "constant", &sk(), &cfg).unwrap();
    for (x, s) in est.chi.iter().zip(&est.se) {
        assert_eq!(*x, norm_sq_n(&c));
        assert_eq!(*s, 0.0);
    }
    let rep = check_chi_properties(&est).unwrap();
    assert_eq!(rep.shape, ChiShape::Constant);
    assert!(rep.flags.is_empty());
}

#[test]
fn linear_algorithm_has_linear_chi() {
    let cfg = ChiConfig { n: 32, p_grid: grid(), reps: 400, seed: spinlab::selftest::SEED, swap: false };
    let est = estimate_chi(&linear, "linear", &sk(), &cfg).unwrap();
    let (c1, s1) = (est.chi[4], est.se[4]);
    for j in 0..4 {
        let p = est.p_grid[j];
        let se = est.se[j].hypot(p * s1);
        assert!((est.chi[j] - p * c1).abs() <= 3.0 * se, "p = {p}: {} vs {} (se {se}, all {:?} {:?})", est.chi[j], p * c1, est.chi, est.se);
    }
    let rep = check_chi_properties(&est).unwrap();
    assert!(rep.flags.is_empty(), "{:?}", rep.flags);
    assert_eq!(rep.shape, ChiShape::Increasing);
}

#[test]
fn linear_chi_at_zero_is_unbiased_across_seeds() {
    let seeds = 20u64;
    let mut zsum = 0.0;
    for seed in 0..seeds {
        let cfg = ChiConfig { n: 32, p_grid: vec![0.0, 1.0], reps: 200, seed, swap: false };
        let est = estimate_chi(&linear, "linear", &sk(), &cfg).unwrap();
        zsum += est.chi[0] / est.se[0];
    }
    let zbar = zsum / seeds as f64;
    assert!(zbar.abs() <= 3.0 / (seeds as f64).sqrt(), "mean z {zbar}");
}

#[test]
fn chi_at_one_is_the_mean_squared_norm() {
    let m = sk();
    let cfg = ChiConfig { n: 24, p_grid: vec![1.0], reps: 10, seed: 3, swap: false };
    let est = estimate_chi(&ga, "ga", &m, &cfg).unwrap();
    let norms: Vec<f64> = (0..10u64)
        .map(|r| {
            let (h, _) = pair_correlated(&m, 24, 1.0, rng::derive(3, &[label::REPLICA, r])).unwrap();
            norm_sq_n(&ga(&h, rng::derive(3, &[label::STEP, r])).unwrap())
        })
        .collect();
    let mean = norms.iter().sum::<f64>() / 10.0;
    assert!((est.chi[0] - mean).abs() < 1e-12);
}

#[test]
fn chi_is_symmetric_under_swapping_the_pair() {
    let cfg = ChiConfig { n: 16, p_grid: grid(), reps: 10, seed: 4, swap: false };
    let a = estimate_chi(&ga, "ga", &sk(), &cfg).unwrap();
    let b = estimate_chi(&ga, "ga", &sk(), &ChiConfig { swap: true, ..cfg }).unwrap();
    assert_eq!(a.chi, b.chi);
    assert_eq!(a.se, b.se);
}

#[test]
fn chi_checks_need_a_proper_grid() {
    let cfg = ChiConfig { n: 8, p_grid: grid(), reps: 5, seed: 0, swap: false };
    assert!(estimate_chi(&linear, "linear", &sk(), &cfg).is_err());
    let est = ChiEstimate { p_grid: vec![0.0, 1.0], chi: vec![0.1, 0.2], se: vec![0.0; 2], reps: 10, algorithm: "x".into(), n: 4 };
    assert!(check_chi_properties(&est).is_err());
}

#[test]
fn injected_dip_and_range_violations_are_flagged() {
    let mk = |chi: Vec<f64>| ChiEstimate { p_grid: grid(), se: vec![0.01; 5], chi, reps: 50, algorithm: "synthetic".into(), n: 8 };
    let rep = check_chi_properties(&mk(vec![0.1, 0.3, 0.1, 0.5, 0.7])).unwrap();
    assert!(rep.flags.contains(&ChiFlag::Monotone { p_lo: 0.25, p_hi: 0.5 }));
    let rep = check_chi_properties(&mk(vec![0.1, 0.3, 0.5, 0.9, 1.5])).unwrap();
    assert!(rep.flags.contains(&ChiFlag::Range { p: 1.0 }));
    let rep = check_chi_properties(&mk(vec![0.1, 0.6, 0.65, 0.68, 0.7])).unwrap();
    assert!(rep.flags.iter().any(|f| matches!(f, ChiFlag::Chord { .. })));
}

#[test]
fn concentration_trivial_cases() {
    let alg = constant(Point::from_element(16, 0.5));
    let c = overlap_concentration(&alg, &sk(), 16, 0.5, 30, 0.01, 5).unwrap();
    assert_eq!(c.sd, 0.0);
    assert_eq!(c.fraction, 0.0);

    let c = overlap_concentration(&ga, &sk(), 16, 0.5, 30, 2.0, 5).unwrap();
    assert_eq!(c.fraction, 0.0);
    assert!(c.wilson.0 == 0.0 && c.wilson.1 > 0.0);
    assert!(overlap_concentration(&ga, &sk(), 16, 0.5, 29, 0.1, 5).is_err());
}

#[test]
fn gradient_ascent_overlaps_concentrate_with_dimension() {
    let m = Mixture::new(&[(2, 1.0)], 0.0).unwrap();
    let sds: Vec<f64> = [32, 64, 128].iter().map(|&n| overlap_concentration(&ga, &m, n, 0.5, 30, 0.1, 6).unwrap().sd).collect();
    let x: Vec<f64> = [32f64, 64.0, 128.0].iter().map(|n| n.ln()).collect();
    let y: Vec<f64> = sds.iter().map(|s| s.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / 3.0, y.iter().sum::<f64>() / 3.0);
    let slope = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "sds {sds:?}");
    assert!(sds[2] < sds[0], "sds {sds:?}");
}

#[test]
fn branching_with_a_single_truncated_leaf() {
    // p_1 = 1 with k_1 = 1: every leaf carries the same Hamiltonian
    let cfg = BranchingConfig {
        n: 16,
        shape: TreeShape::new(vec![1, 3]).unwrap(),
        p: CorrelationLadder::new(vec![0.0, 1.0, 1.0]).unwrap(),
        q: OverlapLadder::new(vec![0.0, 0.5, 1.0]).unwrap(),
        eta: 0.1,
        reps: 3,
        seed: 7,
        chi1: 0.8,
        extend: false,
    };
    let rep = run_branching_experiment(&ga, &sk(), &cfg).unwrap();
    assert_eq!(rep.underline_depth, 1);
    for run in &rep.runs {
        assert_eq!(run.r.len(), 1);
        assert_eq!(rep.target[0][0], 0.5);
        assert_eq!(run.max_dev, (run.r[0][0] - 0.5).abs());
    }
}

#[test]
fn independent_branching_with_constant_algorithm() {
    let c = Point::from_fn(12, |i, _| (i as f64 * 0.3).cos() * 0.9);
    let alg = constant(c.clone());
    let cfg = BranchingConfig {
        n: 12,
        shape: TreeShape::new(vec![3]).unwrap(),
        p: CorrelationLadder::new(vec![0.0, 1.0]).unwrap(),
        q: OverlapLadder::new(vec![0.2, 1.0]).unwrap(),
        eta: 0.1,
        reps: 2,
        seed: 8,
        chi1: 1.0,
        extend: false,
    };
    let rep = run_branching_experiment(&alg, &sk(), &cfg).unwrap();
    let want = norm_sq_n(&c);
    for run in &rep.runs {
        for row in &run.r {
            assert!(row.iter().all(|v| *v == want));
        }
    }
}

#[test]
fn branching_matches_aligned_targets_within_concentration() {
    let m = sk();
    let n = 64;
    let cfg = ChiConfig { n, p_grid: vec![0.0, 0.5, 1.0], reps: 30, seed: 9, swap: false };
    let est = estimate_chi(&ga, "ga", &m, &cfg).unwrap();
    let (q0, q1, chi1) = (est.chi[0], est.chi[1], est.chi[2]);
    assert!(0.0 <= q0 && q0 < q1 && q1 < 1.0, "{:?}", est.chi);
    let sd = [0.0, 0.5].iter().map(|&p| overlap_concentration(&ga, &m, n, p, 30, 0.1, 10).unwrap().sd).fold(0.0, f64::max);
    let bcfg = BranchingConfig {
        n,
        shape: TreeShape::new(vec![2, 2]).unwrap(),
        p: CorrelationLadder::new(vec![0.0, 0.5, 1.0]).unwrap(),
        q: OverlapLadder::new(vec![q0, q1, 1.0]).unwrap(),
        eta: 0.1,
        reps: 10,
        seed: 11,
        chi1,
        extend: false,
    };
    let rep = run_branching_experiment(&ga, &m, &bcfg).unwrap();
    let target = &rep.target;
    let mut total = 0.0;
    for run in &rep.runs {
        let mut worst = 0.0f64;
        for (i, (row, trow)) in run.r.iter().zip(target).enumerate() {
            for (j, (v, t)) in row.iter().zip(trow).enumerate() {
                if i != j {
                    worst = worst.max((v - t).abs());
                }
            }
        }
        total += worst;
    }
    let mean_worst = total / rep.runs.len() as f64;
    assert!(mean_worst <= 3.0 * sd, "mean worst {mean_worst} vs sd {sd}");
}

#[test]
fn branching_diagonal_is_the_output_norm() {
    let cfg = BranchingConfig {
        n: 20,
        shape: TreeShape::new(vec![2, 2]).unwrap(),
        p: CorrelationLadder::new(vec![0.0, 0.4, 1.0]).unwrap(),
        q: OverlapLadder::new(vec![0.0, 0.3, 1.0]).unwrap(),
        eta: 0.2,
        reps: 2,
        seed: 12,
        chi1: 1.0,
        extend: true,
    };
    let m = sk();
    let rep = run_branching_experiment(&ga, &m, &cfg).unwrap();
    for run in &rep.runs {
        let ens = sample_ensemble(&m, 20, &cfg.shape, &cfg.p, run.seed).unwrap();
        let asd = (0..cfg.reps as u64).map(|r| rng::derive(12, &[label::STEP, r])).collect::<Vec<_>>();
        let r = (0..cfg.reps as u64).find(|&r| rng::derive(12, &[label::REPLICA, r]) == run.seed).unwrap();
        for u in 0..4 {
            let x = ga(&ens.leaf_hamiltonian(u).unwrap(), asd[r as usize]).unwrap();
            assert_eq!(run.r[u][u], norm_sq_n(&x));
        }
        let ext = run.extended.as_ref().unwrap();
        assert!(ext.r.iter().enumerate().all(|(i, row)| (row[i] - 1.0).abs() < 1e-9));
    }
}

#[test]
fn single_leaf_grand_max_beats_gradient_ascent() {
    let m = sk();
    let shape = TreeShape::new(vec![1]).unwrap();
    let ens = sample_ensemble(&m, 24, &shape, &CorrelationLadder::new(vec![0.0, 1.0]).unwrap(), 13).unwrap();
    let q = DMatrix::from_element(1, 1, 1.0);
    let cfg = GrandMaxConfig { eta: 0.1, restarts: 4, seed: 14, iters: 300, lr: 0.1 };
    let g = constrained_grand_max(&ens, &q, &Point::zeros(24), &cfg).unwrap();
    let h = ens.leaf_hamiltonian(0).unwrap();
    let best_ga = (0..4u64)
        .map(|r| {
            let x0 = random_on_sphere(24, 1.0, &mut rng::stream(14, &[label::INIT, r]));
            gradient_ascent(&h, &x0, 300, &[0.1], Region::Ball(1.0)).unwrap().final_energy_per_n()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let best = g.best.unwrap();
    assert_eq!(g.feasible_restarts, 4);
    assert!(best >= best_ga - 1e-9 * best_ga.abs(), "{best} vs {best_ga}");
}

#[test]
fn loose_band_grand_max_matches_independent_maxima() {
    let m = sk();
    let n = 24;
    let shape = TreeShape::new(vec![2]).unwrap();
    let ens = sample_ensemble(&m, n, &shape, &CorrelationLadder::new(vec![0.0, 1.0]).unwrap(), 15).unwrap();
    let q = target_overlap_matrix(&shape, &OverlapLadder::new(vec![0.0, 1.0]).unwrap()).unwrap();
    let cfg = GrandMaxConfig { eta: 2.0, restarts: 3, seed: 16, iters: 2000, lr: 0.1 };
    let g = constrained_grand_max(&ens, &q, &Point::zeros(n), &cfg).unwrap();
    let sum: f64 = (0..2).map(|u| top_half(&ens.leaf_hamiltonian(u).unwrap())).sum();
    let best = g.best.unwrap();
    assert!((best - sum).abs() <= 0.01 * sum, "{best} vs {sum}");
}
