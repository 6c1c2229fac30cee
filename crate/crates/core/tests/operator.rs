use lightda::adjoint::seeded_unstable_column;
use lightda::obs_operator::{
    alpha_linearity_test_lightning, flash_rate, flash_rate_adjoint, flash_rate_tl, log_alphas, LightningOperatorParams,
};
use proptest::prelude::*;

fn params() -> LightningOperatorParams<f64> {
    LightningOperatorParams::default()
}

/// `c (a sqrt(2 CAPE) - b)^k` written out with the published constants.
fn by_hand(cape: f64) -> f64 {
    5e-7 * (0.677 * (2.0 * cape).sqrt() - 17.286).max(0.0).powf(4.55)
}

#[test]
fn threshold_is_the_zero_of_the_bracket() {
    let p = params();
    assert!(p.flash_rate_from_cape(325.973).unwrap().abs() <= 1e-12);
    let zero = 17.286f64 * 17.286 / (2.0 * 0.677 * 0.677);
    assert!((p.bracket_zero_cape() - zero).abs() < 1e-12);
    assert!((p.cape_min - zero).abs() <= 1e-3);
    assert!(p.flash_rate_from_cape(325.9).is_err());
}

#[test]
fn flash_rate_matches_the_closed_form() {
    let p = params();
    for cape in [400.0, 800.0, 1500.0, 3000.0, 6000.0] {
        let h = p.flash_rate_from_cape(cape).unwrap();
        assert!((h - by_hand(cape)).abs() <= 1e-12 * h.max(1.0), "CAPE {cape}");
    }
}

#[test]
fn derivative_matches_central_differences() {
    let p = params();
    for cape in [400.0, 1000.0, 2500.0, 5000.0] {
        let e = 1e-3;
        let fd = (by_hand(cape + e) - by_hand(cape - e)) / (2.0 * e);
        let d = p.flash_rate_derivative(cape);
        assert!((d - fd).abs() <= 1e-6 * fd.abs(), "CAPE {cape}: {d} vs {fd}");
    }
}

#[test]
fn tangent_linear_matches_finite_differences() {
    let p = params();
    for seed in 0..5 {
        let col = seeded_unstable_column(seed, &p).unwrap();
        let n = col.n_levels();
        let dir: Vec<f64> = (0..n).map(|k| (-(k as f64) / 10.0).exp() * (1.0 + 0.3 * (k as f64).sin())).collect();
        let eps = 1e-4;
        let shift = |s: f64| {
            let t = col.temperature().iter().zip(&dir).map(|(t, d)| t + s * d).collect();
            flash_rate(&col.with_temperature(t).unwrap(), &p).unwrap()
        };
        let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
        let tl = flash_rate_tl(&col, &dir, &p).unwrap();
        assert!((tl - fd).abs() <= 1e-3 * fd.abs(), "seed {seed}: {tl} vs {fd}");

        let ad = flash_rate_adjoint(&col, 0.7, &p).unwrap();
        let rhs: f64 = ad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((0.7 * tl - rhs).abs() <= 1e-12 * rhs.abs());
    }
}

#[test]
fn small_perturbations_behave_linearly_and_large_ones_do_not() {
    let p = params();
    let col = seeded_unstable_column(3, &p).unwrap();
    let dir: Vec<f64> = col.height().iter().map(|z| 0.5 * (-(z - col.height()[0]) / 1500.0).exp()).collect();
    let curve = alpha_linearity_test_lightning(&col, &dir, &log_alphas(-5, 0, 5), &p).unwrap();
    let best = curve.iter().map(|q| q.log10_abs_1_minus_f).fold(f64::INFINITY, f64::min);
    assert!(best <= -3.0, "best {best}");
    let big: Vec<f64> = dir.iter().map(|d| d * 14.0 / dir.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let at_one = alpha_linearity_test_lightning(&col, &big, &[1.0], &p).unwrap()[0].log10_abs_1_minus_f;
    assert!(at_one >= -1.0, "{at_one}");
}

proptest! {
    #[test]
    fn flash_rate_is_non_negative_and_monotone(a in 0.0f64..8000.0, b in 0.0f64..8000.0) {
        let p = params();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(p.flash_rate_extended(lo) >= 0.0);
        prop_assert!(p.flash_rate_extended(lo) <= p.flash_rate_extended(hi));
        prop_assert!(p.flash_rate_derivative(lo) >= 0.0);
    }
}
