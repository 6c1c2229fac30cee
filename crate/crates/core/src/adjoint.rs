//! Dot-product tests `<L x, y> = <x, L^T y>` for every linear operator used
//! in the gradient computations, over seeded random cases.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::covariance::{factor_vertical_sqrt, Cvt, CvtSpec, RecursiveFilter, VerticalCovariance};
use crate::error::Result;
use crate::obs_operator::{linearize, LightningOperatorParams};
use crate::osse::{sounding, standard_levels, GridConfig, SoundingConfig};
use crate::real::relative_difference;
use crate::thermo::{compute_cape, AtmosColumn};
use crate::toy_model::{GridState, ModelConfig, ReferenceState, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdjointReport {
    pub operator: &'static str,
    pub cases: usize,
    pub max_relative_error: f64,
}

impl AdjointReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn normal_field(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || normal(rng))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A surface-based unstable sounding on the default 60-level grid with a
/// little low-level noise, resampled until its CAPE clears `cape_min`.
pub fn random_unstable_column(rng: &mut ChaCha8Rng, params: &LightningOperatorParams<f64>) -> Result<AtmosColumn<f64>> {
    let grid = GridConfig::default();
    let s = SoundingConfig::default();
    let (pressure, height) = standard_levels(&grid, &s);
    loop {
        let (mut t, q) = sounding(rng.random_range(0.3..=1.0), &s, &height);
        for v in t.iter_mut().take(15) {
            *v += 0.2 * normal(rng);
        }
        let column = AtmosColumn::new(pressure.clone(), t, q, height.clone())?;
        if compute_cape(&column)?.cape > params.cape_min * 2.0 {
            return Ok(column);
        }
    }
}

/// `random_unstable_column` from a fresh generator seeded with `seed`.
pub fn seeded_unstable_column(seed: u64, params: &LightningOperatorParams<f64>) -> Result<AtmosColumn<f64>> {
    random_unstable_column(&mut ChaCha8Rng::seed_from_u64(seed), params)
}

pub fn lightning_operator(cases: usize, seed: u64) -> Result<AdjointReport> {
    let params = LightningOperatorParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let column = random_unstable_column(&mut rng, &params)?;
        let lin = linearize(&column, &params)?;
        let dx = normal_vec(column.n_levels(), &mut rng);
        let dy = normal(&mut rng);
        let lhs = lin.tangent(&dx)? * dy;
        let rhs = dot(&dx, &lin.adjoint(dy));
        worst = worst.max(relative_difference(lhs, rhs));
    }
    Ok(AdjointReport { operator: "lightning_operator", cases, max_relative_error: worst })
}

/// The filter is its own adjoint.
pub fn recursive_filter(cases: usize, seed: u64) -> Result<AdjointReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (nx, ny) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let filter = RecursiveFilter::new(rng.random_range(0.5..6.0), rng.random_range(1..=4))?;
        let x = Array2::from_shape_simple_fn((ny, nx), || normal(&mut rng));
        let y = Array2::from_shape_simple_fn((ny, nx), || normal(&mut rng));
        let lhs = (&filter.apply(x.view()) * &y).sum();
        let rhs = (&x * &filter.apply(y.view())).sum();
        worst = worst.max(relative_difference(lhs, rhs));
    }
    Ok(AdjointReport { operator: "recursive_filter", cases, max_relative_error: worst })
}

fn random_covariance(n: usize, rng: &mut ChaCha8Rng) -> Result<VerticalCovariance> {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| normal(rng));
    VerticalCovariance::from_matrix(&a * a.transpose() / n as f64)
}

pub fn cvt(cases: usize, seed: u64) -> Result<AdjointReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (nl, ny, nx) = (rng.random_range(2..=10), rng.random_range(3..=12), rng.random_range(3..=12));
        let cov = random_covariance(nl, &mut rng)?;
        let mut spec = CvtSpec::new(factor_vertical_sqrt(&cov, rng.random_range(0.5..=1.0))?, rng.random_range(0.5..4.0), 4);
        spec.variance_scale = (0..nl).map(|_| rng.random_range(0.5..1.5)).collect();
        let u = Cvt::new(spec, nx, ny)?;
        let v = normal_vec(u.control_len(), &mut rng);
        let x = normal_field(u.grid_shape(), &mut rng);
        let lhs = (&u.apply(&v)? * &x).sum();
        let rhs = dot(&v, &u.adjoint(&x)?);
        worst = worst.max(relative_difference(lhs, rhs));
    }
    Ok(AdjointReport { operator: "cvt", cases, max_relative_error: worst })
}

/// Multi-step TL/adjoint of the toy model; odd cases switch on the
/// quadratic term so the linearisation depends on the trajectory.
pub fn toy_model(cases: usize, seed: u64) -> Result<AdjointReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (nl, ny, nx) = (rng.random_range(2..=6), rng.random_range(3..=10), rng.random_range(3..=10));
        let pressure: Vec<f64> = (0..nl).map(|l| 100_000.0 - 8_000.0 * l as f64).collect();
        let height: Vec<f64> = (0..nl).map(|l| 700.0 * l as f64).collect();
        let reference = ReferenceState {
            temperature: (0..nl).map(|l| 295.0 - 4.5 * l as f64).collect(),
            mixing_ratio: (0..nl).map(|l| 0.012 * (-(l as f64) / 3.0).exp()).collect(),
        };
        let t = Array3::from_shape_fn((nl, ny, nx), |(l, _, _)| reference.temperature[l] + 2.0 * normal(&mut rng));
        let q = Array3::from_shape_fn((nl, ny, nx), |(l, _, _)| reference.mixing_ratio[l]);
        let state = GridState::new(pressure, height, t, q)?;
        let config = ModelConfig {
            wind_u: rng.random_range(-1.0..=1.0),
            wind_v: rng.random_range(-1.0..=1.0),
            relaxation_rate: rng.random_range(0.0..0.1),
            quadratic_coefficient: if case % 2 == 1 { 0.01 } else { 0.0 },
            ..ModelConfig::default()
        };
        let model = ToyModel::new(config, reference)?;
        let steps = rng.random_range(1..=8);
        let trajectory = model.integrate(&state, steps)?;
        let d = normal_field(state.shape(), &mut rng);
        let e = normal_field(state.shape(), &mut rng);
        let lhs = (&model.propagate_tl_temperature(&trajectory, &d, steps) * &e).sum();
        let rhs = (&d * &model.propagate_adjoint_temperature(&trajectory, &e, steps)).sum();
        worst = worst.max(relative_difference(lhs, rhs));
    }
    Ok(AdjointReport { operator: "toy_model", cases, max_relative_error: worst })
}

pub fn all(cases: usize, seed: u64) -> Result<Vec<AdjointReport>> {
    Ok(vec![
        lightning_operator(cases, seed)?,
        recursive_filter(cases, seed)?,
        cvt(cases, seed)?,
        toy_model(cases, seed)?,
    ])
}
