//! Variational lightning data assimilation at desk scale: a CAPE-based
//! flash-rate observation operator, 1D-VAR column retrieval, incremental
//! 3D-VAR/4D-VAR over a toy advection model, and OSSE scoring.

pub mod adjoint;
pub mod config;
pub mod covariance;
pub mod error;
pub mod experiment;
pub mod io;
pub mod minimizer;
pub mod obs_operator;
pub mod osse;
pub mod real;
pub mod thermo;
pub mod toy_model;
pub mod var1d;
pub mod var_nd;
pub mod verify;

pub use error::{Error, Result};
pub use real::Real;

pub type AtmosColumn = thermo::AtmosColumn<f64>;
pub type ParcelDiagnostics = thermo::ParcelDiagnostics<f64>;
pub type LightningOperatorParams = obs_operator::LightningOperatorParams<f64>;
pub type MinimizeProblem = minimizer::MinimizeProblem<f64>;
pub type MinimizeReport = minimizer::MinimizeReport<f64>;
pub type RecursiveFilter = covariance::RecursiveFilter<f64>;
pub type InnovationStats = verify::InnovationStats<f64>;

/// Single-precision variants of the scalar-generic types.
pub mod single {
    pub type AtmosColumn = crate::thermo::AtmosColumn<f32>;
    pub type ParcelDiagnostics = crate::thermo::ParcelDiagnostics<f32>;
    pub type LightningOperatorParams = crate::obs_operator::LightningOperatorParams<f32>;
    pub type MinimizeProblem = crate::minimizer::MinimizeProblem<f32>;
    pub type RecursiveFilter = crate::covariance::RecursiveFilter<f32>;
}

pub use config::ExperimentConfig;
pub use covariance::{Cvt, CvtSpec, ForecastPairSet, VerticalCovariance};
pub use experiment::Experiment;
pub use toy_model::{GridState, ModelConfig, ToyModel};
pub use var1d::{LightningObservation, QcStatus, RetrievalResult};
pub use var_nd::Scheme;
