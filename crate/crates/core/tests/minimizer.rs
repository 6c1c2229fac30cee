use lightda::minimizer::{conmin_cg, gradient_check, Bounds, MinimizeProblem, MinimizeStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SPD matrix with eigenvalues spread log-uniformly over `[1, cond]`.
fn spd(n: usize, cond: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    let q = a.qr().q();
    let d = DVector::from_fn(n, |i, _| cond.powf(i as f64 / (n - 1) as f64));
    &q * DMatrix::from_diagonal(&d) * q.transpose()
}

fn quadratic(a: &DMatrix<f64>, b: &DVector<f64>) -> impl FnMut(&[f64], &mut [f64]) -> f64 {
    let (a, b) = (a.clone(), b.clone());
    move |x: &[f64], g: &mut [f64]| {
        let x = DVector::from_column_slice(x);
        let ax = &a * &x;
        g.copy_from_slice((&ax - &b).as_slice());
        0.5 * x.dot(&ax) - b.dot(&x)
    }
}

#[test]
fn spd_quadratic_matches_direct_solve() {
    let n = 10;
    for seed in 0..8 {
        let a = spd(n, 100.0, seed);
        let b = DVector::from_fn(n, |i, _| (i as f64 * 0.37 + seed as f64).sin());
        let exact = a.clone().cholesky().unwrap().solve(&b);
        let problem = MinimizeProblem::new(n).with_max_iterations(10 * n).with_gradient_target(1e-12);
        let (x, report) = conmin_cg(&problem, &mut quadratic(&a, &b), &vec![0.0; n]).unwrap();
        let err = (DVector::from_vec(x) - &exact).norm() / exact.norm();
        assert!(err <= 1e-8, "seed {seed}: relative error {err:e} after {} iterations", report.iterations_used);
        assert!(report.iterations_used <= 10 * n);
        assert!(report.cost_final <= report.cost_initial);
    }
}

#[test]
fn stationary_start_returns_immediately() {
    let a = spd(6, 10.0, 1);
    let b = DVector::zeros(6);
    let (x, report) = conmin_cg(&MinimizeProblem::new(6), &mut quadratic(&a, &b), &[0.0; 6]).unwrap();
    assert_eq!(x, vec![0.0; 6]);
    assert_eq!(report.iterations_used, 0);
    assert_eq!(report.status, MinimizeStatus::Converged);
}

#[test]
fn gradient_check_accepts_exact_and_flags_corrupted_gradients() {
    let n = 12;
    let a = spd(n, 50.0, 3);
    let b = DVector::from_element(n, 1.0);
    let x0: Vec<f64> = (0..n).map(|i| 0.1 * i as f64).collect();
    let exact = gradient_check(&mut quadratic(&a, &b), &x0, 1e-3).unwrap();
    assert!(exact <= 1e-8, "{exact:e}");

    let mut inner = quadratic(&a, &b);
    let mut corrupted = |x: &[f64], g: &mut [f64]| {
        let f = inner(x, g);
        g[5] *= 1.1;
        f
    };
    let bad = gradient_check(&mut corrupted, &x0, 1e-3).unwrap();
    assert!(bad >= 0.05, "{bad:e}");
}

#[test]
fn bounded_minimum_sits_on_the_bound() {
    let n = 5;
    let problem = MinimizeProblem::new(n).with_gradient_target(1e-10).with_bounds(Bounds::uniform(n, -1.0, 0.5));
    let mut f = |x: &[f64], g: &mut [f64]| {
        let mut c = 0.0;
        for (k, (xi, gi)) in x.iter().zip(g.iter_mut()).enumerate() {
            let d = xi - (k as f64 - 1.0);
            *gi = 2.0 * d;
            c += d * d;
        }
        c
    };
    let (x, _) = conmin_cg(&problem, &mut f, &[0.0; 5]).unwrap();
    let expected = [-1.0, 0.0, 0.5, 0.5, 0.5];
    for (a, e) in x.iter().zip(expected) {
        assert!((a - e).abs() < 1e-8, "{x:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn accepted_costs_never_increase(seed in 0u64..1000, cond in 1.0f64..1e4) {
        let n = 15;
        let a = spd(n, cond, seed);
        let b = DVector::from_fn(n, |i, _| ((i as u64 + seed) as f64).cos());
        let problem = MinimizeProblem::new(n).with_max_iterations(300).with_gradient_target(1e-8);
        let (_, report) = conmin_cg(&problem, &mut quadratic(&a, &b), &vec![0.0; n]).unwrap();
        for w in report.history.windows(2) {
            prop_assert!(w[1].cost <= w[0].cost);
        }
        prop_assert!(report.cost_final <= report.cost_initial);
    }
}
