#![allow(dead_code)]

pub mod dense;
pub mod qc;

use lightda::covariance::{factor_vertical_sqrt, Cvt, CvtSpec, VerticalCovariance};
use lightda::osse::{sounding, standard_levels, GridConfig, SoundingConfig};
use lightda::toy_model::{GridState, ModelConfig, ToyModel};
use nalgebra::{DMatrix, DVector};
use ndarray::Array3;

/// One periodic pass `F^T F` with `F = (1 - a)(I - a S)^-1`, built densely.
pub fn filter_matrix_1d(n: usize, lengthscale: f64, passes: usize) -> DMatrix<f64> {
    let e = lengthscale * lengthscale / (2.0 * passes as f64);
    let a = ((2.0 * e + 1.0) - (4.0 * e + 1.0).sqrt()) / (2.0 * e);
    let mut m = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        m[(i, (i + n - 1) % n)] -= a;
    }
    let f = m.try_inverse().expect("invertible") * (1.0 - a);
    let pass = f.transpose() * &f;
    let mut out = DMatrix::identity(n, n);
    for _ in 0..passes {
        out = &pass * out;
    }
    out
}

/// The covariance `U U^T` implied by a CVT, assembled from its ingredients:
/// Kronecker product of the scaled vertical covariance with the squared
/// horizontal filter, amplitude-normalised to unit variance.
/// Index order is level, then y, then x.
pub fn dense_b(cvt: &Cvt) -> DMatrix<f64> {
    let spec = cvt.spec();
    let (nl, ny, nx) = cvt.grid_shape();
    let px = filter_matrix_1d(nx, spec.horizontal_lengthscale, spec.filter_passes);
    let py = filter_matrix_1d(ny, spec.horizontal_lengthscale, spec.filter_passes);
    let cells = nx * ny;
    let g = DMatrix::from_fn(cells, cells, |r, c| py[(r / nx, c / nx)] * px[(r % nx, c % nx)]);
    let g2 = &g * &g;
    let amp2 = 1.0 / g2[(0, 0)];
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.variance_scale));
    let k = &s * &spec.vertical_sqrt * spec.vertical_sqrt.transpose() * &s;
    DMatrix::from_fn(nl * cells, nl * cells, |r, c| amp2 * k[(r / cells, c / cells)] * g2[(r % cells, c % cells)])
}

pub fn ar1_covariance(n: usize, rho: f64, sd: f64) -> VerticalCovariance {
    VerticalCovariance::from_matrix(DMatrix::from_fn(n, n, |i, j| sd * sd * rho.powi((i as i32 - j as i32).abs())))
        .expect("valid covariance")
}

pub fn cvt_for(cov: &VerticalCovariance, lengthscale: f64, nx: usize, ny: usize) -> Cvt {
    let sqrt = factor_vertical_sqrt(cov, 1.0).expect("factor");
    Cvt::new(CvtSpec::new(sqrt, lengthscale, 4), nx, ny).expect("cvt")
}

/// A grid of the default unstable sounding on `n_levels` levels `dz` apart,
/// with a smooth horizontal temperature pattern added.
pub fn unstable_grid(nx: usize, ny: usize, n_levels: usize, dz: f64) -> GridState {
    let grid = GridConfig { nx, ny, n_levels, dz, ..GridConfig::default() };
    let s = SoundingConfig::default();
    let (pressure, height) = standard_levels(&grid, &s);
    let (t, q) = sounding(1.0, &s, &height);
    let temperature = Array3::from_shape_fn((n_levels, ny, nx), |(l, j, i)| {
        t[l] + 0.3 * (i as f64 * 0.7).sin() * (j as f64 * 0.4).cos() * (-(l as f64) / 4.0).exp()
    });
    let mixing_ratio = Array3::from_shape_fn((n_levels, ny, nx), |(l, _, _)| q[l]);
    GridState::new(pressure, height, temperature, mixing_ratio).expect("grid")
}

pub fn linear_model(state: &GridState) -> ToyModel {
    let config = ModelConfig { wind_u: 0.4, wind_v: -0.3, relaxation_rate: 0.05, ..ModelConfig::default() };
    ToyModel::new(config, state.mean_profile()).expect("model")
}

pub fn flat(a: &Array3<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len(), a.iter().copied())
}

pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
