//! Closed-form dense linear-algebra solutions the variational analyses are
//! checked against.

use super::*;
use lightda::obs_operator::{flash_rate, LightningOperatorParams};
use lightda::var1d::{LightningObservation, PseudoObservation};
use lightda::var_nd::{
    analyze_3dvar_direct, analyze_3dvar_pseudo, analyze_window, AssimilationWindow, SlotObservations, VarConfig,
    WindowSlot,
};
use lightda::GridState;
use nalgebra::{DMatrix, DVector};
use ndarray::Array3;

pub fn tight() -> VarConfig {
    VarConfig { max_iterations: 5000, gradient_reduction: 1e-12, ..VarConfig::default() }
}

pub fn index(state: &GridState, l: usize, j: usize, i: usize) -> usize {
    (l * state.ny() + j) * state.nx() + i
}

/// `B G^T (G B G^T + R)^-1 d`.
pub fn blue(b: &DMatrix<f64>, g: &DMatrix<f64>, r: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
    let bg = b * g.transpose();
    let s = g * &bg + DMatrix::from_diagonal(r);
    bg * s.lu().solve(d).expect("innovation covariance is invertible")
}

pub fn pseudo(state: &GridState, i: usize, j: usize, offset: impl Fn(usize) -> f64, std: f64) -> PseudoObservation {
    let column = state.temperature_column(i, j);
    PseudoObservation {
        i,
        j,
        time_min: 0.0,
        temperature: column.iter().enumerate().map(|(l, t)| t + offset(l)).collect(),
        error_std: vec![std; column.len()],
    }
}

/// Largest relative error of `U U^T e_k` against the dense covariance.
pub fn cvt_row_error() -> f64 {
    let cov = ar1_covariance(10, 0.7, 1.3);
    let mut cvt = cvt_for(&cov, 2.0, 9, 9);
    let mut spec = cvt.spec().clone();
    spec.variance_scale = (0..10).map(|l| 0.8 + 0.05 * l as f64).collect();
    cvt = lightda::Cvt::new(spec, 9, 9).unwrap();
    let b = dense_b(&cvt);
    let n = b.nrows();
    let mut worst = 0.0f64;
    for k in [0, 7, 40, 123, 405, n - 1] {
        let mut e = Array3::<f64>::zeros(cvt.grid_shape());
        e.as_slice_mut().unwrap()[k] = 1.0;
        let row = flat(&cvt.apply(&cvt.adjoint(&e).unwrap()).unwrap());
        worst = worst.max(relative_error(&row, &b.column(k).into_owned()));
    }
    worst
}

pub fn pseudo_3dvar_error() -> f64 {
    let state = unstable_grid(9, 9, 10, 1200.0);
    let cvt = cvt_for(&ar1_covariance(10, 0.8, 1.0), 2.0, 9, 9);
    let (i, j) = (4, 3);
    let obs = pseudo(&state, i, j, |l| 1.5 - 0.1 * l as f64, 0.7);

    let result = analyze_3dvar_pseudo(&state, &[obs.clone()], &cvt, &tight()).unwrap();
    assert!(!result.fell_back);

    let b = dense_b(&cvt);
    let g = DMatrix::from_fn(10, b.nrows(), |r, c| if c == index(&state, r, j, i) { 1.0 } else { 0.0 });
    let d = DVector::from_iterator(10, (0..10).map(|l| 1.5 - 0.1 * l as f64));
    let r = DVector::from_element(10, 0.49);
    relative_error(&flat(&result.increment), &blue(&b, &g, &r, &d))
}

pub fn direct_3dvar_error() -> f64 {
    let state = unstable_grid(9, 9, 10, 1200.0);
    let params = LightningOperatorParams::default();
    let cvt = cvt_for(&ar1_covariance(10, 0.8, 0.5), 2.0, 9, 9);
    let (i, j) = (5, 4);
    let column = state.column(i, j).unwrap();
    let hb = flash_rate(&column, &params).unwrap();
    let innovation = 0.02 * hb.max(0.5);
    let obs = LightningObservation::new(i, j, hb + innovation, 0.0);

    let result = analyze_3dvar_direct(&state, &[obs], &cvt, &params, &tight()).unwrap();
    assert_eq!(result.exclusions.unwrap().assimilated, 1);

    // Observation Jacobian by central differences of the nonlinear operator.
    let b = dense_b(&cvt);
    let eps = 1e-4;
    let t = column.temperature().to_vec();
    let mut g = DMatrix::zeros(1, b.nrows());
    for l in 0..10 {
        let mut up = t.clone();
        let mut dn = t.clone();
        up[l] += eps;
        dn[l] -= eps;
        let hu = flash_rate(&column.with_temperature(up).unwrap(), &params).unwrap();
        let hd = flash_rate(&column.with_temperature(dn).unwrap(), &params).unwrap();
        g[(0, index(&state, l, j, i))] = (hu - hd) / (2.0 * eps);
    }
    let oracle = blue(&b, &g, &DVector::from_element(1, 1.0), &DVector::from_element(1, innovation));
    relative_error(&flat(&result.increment), &oracle)
}

pub fn two_slot_4dvar_error() -> f64 {
    let state = unstable_grid(6, 6, 5, 1200.0);
    let model = linear_model(&state);
    let cvt = cvt_for(&ar1_covariance(5, 0.7, 1.0), 1.5, 6, 6);
    let steps = 3;
    let forecast = model.integrate(&state, steps).unwrap().pop().unwrap();

    let o0 = pseudo(&state, 1, 2, |l| 1.0 - 0.2 * l as f64, 0.8);
    let o1 = pseudo(&forecast, 4, 4, |l| -0.5 + 0.1 * l as f64, 0.6);
    let o2 = pseudo(&forecast, 2, 5, |_| 0.7, 0.6);
    let window = AssimilationWindow {
        start_time_min: 0.0,
        slots: vec![
            WindowSlot { step: 0, observations: SlotObservations::Pseudo(vec![o0]) },
            WindowSlot { step: steps, observations: SlotObservations::Pseudo(vec![o1, o2]) },
        ],
    };
    let params = LightningOperatorParams::default();
    let result = analyze_window(&state, &window, &cvt, Some(&model), &params, &tight()).unwrap();
    assert!(!result.fell_back);

    // Propagator from differences of the nonlinear (here linear) model.
    let n = state.temperature.len();
    let base = flat(&forecast.temperature);
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut perturbed = state.clone();
        perturbed.temperature.as_slice_mut().unwrap()[k] += 1.0;
        let f = model.integrate(&perturbed, steps).unwrap().pop().unwrap();
        m.set_column(k, &(flat(&f.temperature) - &base));
    }
    let select = |cells: &[(usize, usize)]| {
        let rows = cells.len() * 5;
        DMatrix::from_fn(rows, n, |r, c| {
            let (i, j) = cells[r / 5];
            if c == index(&state, r % 5, j, i) {
                1.0
            } else {
                0.0
            }
        })
    };
    let h0 = select(&[(1, 2)]);
    let h1 = select(&[(4, 4), (2, 5)]) * &m;
    let mut g = DMatrix::zeros(15, n);
    g.view_mut((0, 0), (5, n)).copy_from(&h0);
    g.view_mut((5, 0), (10, n)).copy_from(&h1);
    let d = DVector::from_iterator(
        15,
        (0..5)
            .map(|l| 1.0 - 0.2 * l as f64)
            .chain((0..5).map(|l| -0.5 + 0.1 * l as f64))
            .chain((0..5).map(|_| 0.7)),
    );
    let r = DVector::from_iterator(15, (0..15).map(|k| if k < 5 { 0.64 } else { 0.36 }));
    relative_error(&flat(&result.increment), &blue(&dense_b(&cvt), &g, &r, &d))
}
