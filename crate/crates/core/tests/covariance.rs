mod common;

use common::*;
use lightda::covariance::{nmc_vertical_covariance, recursive_filter_apply, RecursiveFilter};
use lightda::osse::NmcSampleConfig;
use lightda::ForecastPairSet;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn draw(c: &DMatrix<f64>, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = c.nrows();
    let l = c.clone().cholesky().expect("positive definite").l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
            (&l * z).iter().copied().collect()
        })
        .collect()
}

#[test]
fn impulse_response_is_gaussian_and_isotropic() {
    let n = 61;
    let c = n / 2;
    let mut impulse = Array2::<f64>::zeros((n, n));
    impulse[(c, c)] = 1.0;
    for l in [3.0, 5.0] {
        let resp = recursive_filter_apply(impulse.view(), l, 4).unwrap();
        let gauss = Array2::from_shape_fn((n, n), |(j, i)| {
            let r2 = ((i as f64 - c as f64).powi(2) + (j as f64 - c as f64).powi(2)) / (l * l);
            (-0.5 * r2).exp() / (2.0 * std::f64::consts::PI * l * l)
        });
        // RMS difference relative to the Gaussian peak, over the grid and
        // over the cells above 1% of the peak.
        let peak = gauss[(c, c)];
        let rms = |keep: &dyn Fn(f64) -> bool| {
            let d: Vec<f64> = resp.iter().zip(&gauss).filter(|(_, g)| keep(**g)).map(|(r, g)| (r - g).powi(2)).collect();
            (d.iter().sum::<f64>() / d.len() as f64).sqrt() / peak
        };
        let whole = rms(&|_| true);
        let core = rms(&|g| g > 0.01 * peak);
        assert!(whole <= 0.05 && core <= 0.05, "L {l}: RMS mismatch {whole:.4} (grid), {core:.4} (core)");

        let rotated = Array2::from_shape_fn((n, n), |(j, i)| resp[(i, n - 1 - j)]);
        let asym = (&resp - &rotated).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(asym <= 1e-12, "L {l}: rotation asymmetry {asym:e}");
    }
}

#[test]
fn filter_lines_match_the_dense_operator() {
    let n = 17;
    let dense = filter_matrix_1d(n, 2.5, 4);
    let filter = RecursiveFilter::new(2.5, 4).unwrap();
    for k in 0..n {
        let mut line = vec![0.0; n];
        line[k] = 1.0;
        filter.smooth_line(&mut line);
        for (r, v) in line.iter().enumerate() {
            assert!((v - dense[(r, k)]).abs() < 1e-13, "entry ({r}, {k})");
        }
    }
}

#[test]
fn nmc_recovers_half_the_difference_covariance() {
    let target = NmcSampleConfig::default().target_covariance(10);
    let c = &target * 2.0;
    let est = nmc_vertical_covariance(&ForecastPairSet::new(draw(&c, 500, 11)).unwrap()).unwrap();
    let err = (est.matrix() - &c * 0.5).norm() / (&c * 0.5).norm();
    assert!(err <= 0.15, "Frobenius error {err:.3}");
}

#[test]
fn coupled_block_has_elevated_correlation() {
    let cfg = NmcSampleConfig::default();
    let c = cfg.target_covariance(60) * 2.0;
    let est = nmc_vertical_covariance(&ForecastPairSet::new(draw(&c, 500, 3)).unwrap()).unwrap();
    let corr = est.correlation();
    let inside = corr[(cfg.coupling_start, cfg.coupling_end)];
    let outside = corr[(cfg.coupling_end + 2, cfg.coupling_end + 2 + (cfg.coupling_end - cfg.coupling_start))];
    assert!(inside > 0.2 && inside > outside + 0.15, "inside {inside:.3}, outside {outside:.3}");
}

fn field(nx: usize, ny: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0f64..1.0, nx * ny).prop_map(move |v| Array2::from_shape_vec((ny, nx), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn filter_is_self_adjoint(x in field(12, 9), y in field(12, 9), l in 0.5f64..6.0) {
        let fx = recursive_filter_apply(x.view(), l, 4).unwrap();
        let fy = recursive_filter_apply(y.view(), l, 4).unwrap();
        let a = (&fx * &y).sum();
        let b = (&x * &fy).sum();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300));
    }

    #[test]
    fn filter_output_bounded_by_input(x in field(10, 10), l in 0.5f64..6.0) {
        let x = x.mapv(f64::abs);
        let fx = recursive_filter_apply(x.view(), l, 4).unwrap();
        let max_in = x.iter().fold(0.0f64, |m, v| m.max(*v));
        prop_assert!(fx.iter().all(|v| *v <= max_in * (1.0 + 1e-12) && *v >= -1e-15));
    }

    #[test]
    fn implied_covariance_is_positive_semidefinite(seed in 0u64..500) {
        let cvt = cvt_for(&ar1_covariance(6, 0.5, 1.3), 2.0, 7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..cvt.control_len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dx: Array3<f64> = cvt.apply(&v).unwrap();
        let back = cvt.adjoint(&dx).unwrap();
        let q: f64 = v.iter().zip(&back).map(|(a, b)| a * b).sum();
        prop_assert!(q >= -1e-12 * v.iter().map(|a| a * a).sum::<f64>());
    }

    #[test]
    fn correlation_has_unit_diagonal_and_bounded_entries(seed in 0u64..1000, count in 3usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Vec<f64>> =
            (0..count).map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let est = nmc_vertical_covariance(&ForecastPairSet::new(samples).unwrap()).unwrap();
        let corr = est.correlation();
        for i in 0..8 {
            prop_assert!((corr[(i, i)] - 1.0).abs() <= 1e-12);
        }
        prop_assert!(corr.iter().all(|c| (-1.0..=1.0).contains(c)));
    }
}
