//! Variational analyses against closed-form dense linear algebra.

mod common;

use common::dense::*;
use common::*;

#[test]
fn implied_variance_is_the_vertical_variance() {
    let cov = ar1_covariance(10, 0.6, 2.0);
    let cvt = cvt_for(&cov, 3.0, 9, 9);
    let b = dense_b(&cvt);
    for l in 0..10 {
        let k = l * 81 + 40;
        assert!((b[(k, k)] - 4.0).abs() < 1e-10, "level {l}: {}", b[(k, k)]);
    }
}

#[test]
fn cvt_rows_match_kronecker_covariance() {
    let e = cvt_row_error();
    assert!(e <= 1e-10, "relative error {e:e}");
}

#[test]
fn single_pseudo_observation_3dvar_matches_blue() {
    let e = pseudo_3dvar_error();
    assert!(e <= 1e-6, "relative error {e:e}");
}

#[test]
fn direct_flash_rate_3dvar_near_linear_matches_blue() {
    let e = direct_3dvar_error();
    assert!(e <= 0.05, "relative error {e:e}");
}

#[test]
fn two_slot_linear_4dvar_matches_blue() {
    let e = two_slot_4dvar_error();
    assert!(e <= 1e-6, "relative error {e:e}");
}
