use nalgebra::DMatrix;
use proptest::prelude::*;
use spinlab::core_model::*;
use spinlab::rng;
use spinlab::Error;

fn point(v: &[f64]) -> Point {
    Point::from_vec(v.to_vec())
}

fn random_point(n: usize, r: f64, seed: u64) -> Point {
    random_on_sphere(n, r, &mut rng::stream(seed, &[99]))
}

fn mixed() -> Mixture {
    Mixture::new(&[(2, 0.6), (4, 0.5), (6, 0.3)], 0.2).unwrap()
}

fn fd_gradient(h: &Hamiltonian, x: &Point, step: f64) -> Point {
    Point::from_fn(x.len(), |i, _| {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += step;
        b[i] -= step;
        (h.energy(&a).unwrap() - h.energy(&b).unwrap()) / (2.0 * step)
    })
}

fn rel_err(a: &Point, b: &Point) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn xi_eval_examples() {
    let p4 = Mixture::pure(4, 0.0).unwrap();
    assert_eq!(xi_eval(&p4, 1.0, 0).unwrap(), 1.0);
    assert_eq!(xi_eval(&p4, 1.0, 2).unwrap(), 12.0);
    let m = Mixture::new(&[(2, 1.0), (4, 1.0)], 0.0).unwrap();
    assert!((xi_eval(&m, 0.5, 1).unwrap() - 1.5).abs() < 1e-15);
    assert!(matches!(xi_eval(&m, 0.5, 5), Err(Error::Argument(_))));
}

#[test]
fn sampling_is_deterministic_and_guarded() {
    let p2 = Mixture::pure(2, 0.0).unwrap();
    let a = sample_hamiltonian(&p2, 4, 7).unwrap();
    let b = sample_hamiltonian(&p2, 4, 7).unwrap();
    assert_eq!(a.tensors()[0].data.len(), 16);
    assert_eq!(a, b);

    let p4 = Mixture::pure(4, 0.0).unwrap();
    let h = sample_hamiltonian(&p4, 8, 1).unwrap();
    let d = &h.tensors()[0].data;
    assert_eq!(d.len(), 4096);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!(mean.abs() < 4.0 / 64.0);

    let p6 = Mixture::pure(6, 0.0).unwrap();
    match sample_hamiltonian(&p6, 512, 0) {
        Err(Error::Resource(msg)) => assert!(msg.contains("p=6")),
        other => panic!("expected resource error, got {other:?}"),
    }
}

#[test]
fn energy_examples() {
    let h = sample_hamiltonian(&mixed().with_field(0.0).unwrap(), 5, 3).unwrap();
    assert_eq!(h.energy(&Point::zeros(5)).unwrap(), 0.0);

    let field = Mixture::new(&[], 1.0).unwrap();
    let h = sample_hamiltonian(&field, 4, 0).unwrap();
    assert_eq!(h.energy(&Point::from_element(4, 1.0)).unwrap(), 4.0);

    let p2 = Mixture::pure(2, 0.0).unwrap();
    let h = Hamiltonian::from_tensors(&p2, 2, 0, vec![Tensor { p: 2, data: vec![1.0, 2.0, 3.0, 4.0] }]).unwrap();
    let e = h.energy(&point(&[2f64.sqrt(), 0.0])).unwrap();
    assert!((e - 2f64.sqrt()).abs() < 1e-14);

    let far = Point::from_element(2, 1.5);
    assert!(matches!(h.energy(&far), Err(Error::Domain(_))));
}

#[test]
fn gradient_examples() {
    let c = 0.7;
    let h = sample_hamiltonian(&Mixture::new(&[], c).unwrap(), 5, 0).unwrap();
    let g = h.gradient(&random_point(5, 0.8, 1)).unwrap();
    assert!(g.iter().all(|v| *v == c));

    let p2 = Mixture::pure(2, 0.0).unwrap();
    let h = sample_hamiltonian(&p2, 6, 11).unwrap();
    let x = random_point(6, 0.9, 2);
    assert!(rel_err(&h.gradient(&x).unwrap(), &fd_gradient(&h, &x, 1e-5)) <= 1e-5);

    let p4 = Mixture::pure(4, 0.0).unwrap();
    let h = sample_hamiltonian(&p4, 5, 4).unwrap();
    assert!(h.gradient(&Point::zeros(5)).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn gradient_matches_differences_for_each_degree_and_a_mixture() {
    let cases = [
        Mixture::pure(2, 0.3).unwrap(),
        Mixture::pure(4, 0.0).unwrap(),
        Mixture::pure(6, 0.0).unwrap(),
        mixed(),
    ];
    for (i, m) in cases.iter().enumerate() {
        let h = sample_hamiltonian(m, 5, 20 + i as u64).unwrap();
        let x = random_point(5, 0.9, i as u64);
        let err = rel_err(&h.gradient(&x).unwrap(), &fd_gradient(&h, &x, 1e-5));
        assert!(err <= 1e-5, "case {i}: {err}");
    }
}

#[test]
fn hessian_examples() {
    let p2 = Mixture::pure(2, 0.0).unwrap();
    let n = 5;
    let h = sample_hamiltonian(&p2, n, 9).unwrap();
    let g = DMatrix::from_row_slice(n, n, &h.tensors()[0].data);
    let expect = (&g + g.transpose()) / (n as f64).sqrt();
    for s in 0..3 {
        let hm = h.hessian(&random_point(n, 0.7, s)).unwrap();
        assert!((hm - &expect).abs().max() < 1e-12);
    }

    let p4 = Mixture::pure(4, 0.0).unwrap();
    let h = sample_hamiltonian(&p4, 6, 5).unwrap();
    let x = random_point(6, 0.8, 3);
    let w = random_point(6, 1.0, 4);
    let eps = 1e-5;
    let fd = (h.gradient(&(&x + &w * eps)).unwrap() - h.gradient(&(&x - &w * eps)).unwrap()) / (2.0 * eps);
    assert!(rel_err(&h.hessian_apply(&x, &w).unwrap(), &fd) <= 1e-4);

    let h = sample_hamiltonian(&mixed(), 8, 6).unwrap();
    let x = random_point(8, 0.9, 7);
    let w = random_point(8, 1.0, 8);
    let dense = h.hessian(&x).unwrap() * &w;
    let applied = h.hessian_apply(&x, &w).unwrap();
    assert!((dense - &applied).norm() <= 1e-12 * applied.norm().max(1.0));
    let hm = h.hessian(&x).unwrap();
    assert!((&hm - hm.transpose()).abs().max() < 1e-12);
}

#[test]
fn restricted_eigvec_examples() {
    let n = 6;
    let p2 = Mixture::pure(2, 0.0).unwrap();
    // Hessian is 2 G / sqrt(N) for symmetric G; put diag(3, 1, 0.5, ...) there
    let mut data = vec![0.0; n * n];
    let diag = [3.0, 1.0, 0.5, 0.25, 0.1, 0.05];
    for i in 0..n {
        data[i * n + i] = diag[i] * (n as f64).sqrt() / 2.0;
    }
    let h = Hamiltonian::from_tensors(&p2, n, 0, vec![Tensor { p: 2, data }]).unwrap();
    let mut e1 = Point::zeros(n);
    e1[0] = 1.0;
    let mut e2 = Point::zeros(n);
    e2[1] = 1.0;
    let (v, lam) = restricted_top_eigvec(&h, &Point::zeros(n), &[e1.clone(), e2.clone()]).unwrap();
    assert!((v[0].abs() - 1.0).abs() < 1e-10);
    assert!((lam - 3.0).abs() < 1e-10);

    let rot = [(&e1 + &e2) / 2f64.sqrt(), (&e1 - &e2) / 2f64.sqrt()];
    let (_, lam_rot) = restricted_top_eigvec(&h, &Point::zeros(n), &rot).unwrap();
    assert!((lam_rot - lam).abs() < 1e-10);

    let g = sample_hamiltonian(&mixed(), n, 2).unwrap();
    let x = random_point(n, 0.8, 1);
    let b = random_point(n, 1.0, 2).normalize();
    let (v, lam) = restricted_top_eigvec(&g, &x, std::slice::from_ref(&b)).unwrap();
    assert!((v.dot(&b).abs() - 1.0).abs() < 1e-12);
    let rq = b.dot(&g.hessian_apply(&x, &b).unwrap());
    assert!((lam - rq).abs() < 1e-10);

    let bad = [b.clone(), b * 2.0];
    assert!(matches!(restricted_top_eigvec(&g, &x, &bad), Err(Error::Argument(_))));
}

#[test]
fn op_norm_probe_examples() {
    let c = 0.4;
    let h = sample_hamiltonian(&Mixture::new(&[], c).unwrap(), 6, 0).unwrap();
    assert!((op_norm_probe(&h, 1, 1.0, 3, 1).unwrap() - c).abs() < 1e-12);

    let n = 16;
    let h = sample_hamiltonian(&Mixture::pure(2, 0.0).unwrap(), n, 3).unwrap();
    let g = DMatrix::from_row_slice(n, n, &h.tensors()[0].data);
    let s = (&g + g.transpose()) / (n as f64).sqrt();
    let spectral = s.symmetric_eigen().eigenvalues.amax();
    let probe = op_norm_probe(&h, 2, 1.0, 20, 4).unwrap();
    assert!((probe - spectral).abs() <= 0.02 * spectral, "{probe} vs {spectral}");

    let m = Mixture::new(&[(2, 0.6), (4, 0.5)], 0.2).unwrap();
    let h = sample_hamiltonian(&m, 6, 8).unwrap();
    let lo = op_norm_probe(&h, 3, 1.2, 10, 5).unwrap();
    let hi = op_norm_probe(&h, 3, 1.2, 100, 5).unwrap();
    assert!(hi >= lo);
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let h = sample_hamiltonian(&mixed(), 4, 12).unwrap();
    let mut buf = Vec::new();
    h.write_snapshot(&mut buf).unwrap();
    let back = Hamiltonian::read_snapshot(buf.as_slice()).unwrap();
    assert_eq!(back, h);
    assert!(Hamiltonian::read_snapshot(&buf[..buf.len() - 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pure_energy_is_homogeneous(p in prop::sample::select(vec![2u32, 4, 6]), seed in 0u64..1000, c in -1.0f64..1.0) {
        let m = Mixture::pure(p, 0.0).unwrap();
        let h = sample_hamiltonian(&m, 4, seed).unwrap();
        let x = random_point(4, 1.0, seed);
        let lhs = h.energy(&(&x * c)).unwrap();
        let rhs = c.powi(p as i32) * h.energy(&x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn identical_inputs_give_identical_energies(seed in 0u64..1000) {
        let a = sample_hamiltonian(&mixed(), 4, seed).unwrap();
        let b = sample_hamiltonian(&mixed(), 4, seed).unwrap();
        for k in 0..4 {
            let x = random_point(4, 1.0, k);
            prop_assert_eq!(a.energy(&x).unwrap().to_bits(), b.energy(&x).unwrap().to_bits());
        }
    }

    #[test]
    fn overlap_and_norm_agree(seed in 0u64..1000, r in 0.1f64..1.4) {
        let x = random_point(7, r, seed);
        prop_assert!((norm_sq_n(&x) - r * r).abs() < 1e-12);
        prop_assert!((overlap(&x, &x) - norm_sq_n(&x)).abs() < 1e-15);
    }
}
