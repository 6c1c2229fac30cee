//! Column retrieval of temperature from a flash-rate observation, and the
//! quality control that turns accepted retrievals into pseudo-observations.
//!
//! The retrieval minimises
//!
//! ```text
//! J(X) = 1/2 (X - Xb)^T B^+ (X - Xb) + 1/2 ((H(X) - y) / sigma0)^2
//! ```
//!
//! over the temperature profile. `H` is the flash-rate operator continued by
//! zero below the CAPE threshold so the cost stays finite and C^1 when an
//! iterate wanders below it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::VerticalCovariance;
use crate::error::{Error, Result};
use crate::minimizer::{conmin_cg, Bounds, MinimizeProblem, MinimizeReport, MinimizeStatus};
use crate::obs_operator::LightningOperatorParams;
use crate::thermo::constants::{MAX_TEMPERATURE, MIN_TEMPERATURE};
use crate::thermo::{compute_cape, dry_adiabatic_adjust, linearize_cape, AtmosColumn};
use crate::toy_model::GridState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightningObservation {
    pub i: usize,
    pub j: usize,
    /// Flashes (9 km)^-2 min^-1.
    pub flash_rate: f64,
    /// Minutes.
    pub time_min: f64,
    pub sigma0: f64,
}

impl LightningObservation {
    pub fn new(i: usize, j: usize, flash_rate: f64, time_min: f64) -> Self {
        Self { i, j, flash_rate, time_min, sigma0: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.flash_rate >= 0.0 && self.flash_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("flash rate {} must be finite and >= 0", self.flash_rate)));
        }
        if !(self.sigma0 > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma0 {} must be positive", self.sigma0)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcStatus {
    Accepted,
    RejectedLowCape,
    RejectedSmallImprovement,
    RejectedNonconvergence,
}

impl QcStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QcStatus::Accepted => "accepted",
            QcStatus::RejectedLowCape => "rejected_low_cape",
            QcStatus::RejectedSmallImprovement => "rejected_small_improvement",
            QcStatus::RejectedNonconvergence => "rejected_nonconvergence",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub max_iterations: usize,
    /// Stop once the gradient norm falls by this factor.
    pub gradient_reduction: f64,
    /// Minimum `H(xa) - H(xb)` for acceptance.
    pub min_improvement: f64,
    /// Per-level error std attached to pseudo-observations, K.
    pub pseudo_obs_std: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { max_iterations: 200, gradient_reduction: 1e-2, min_improvement: 0.2, pseudo_obs_std: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrievalResult {
    pub obs: LightningObservation,
    pub background_temperature: Vec<f64>,
    pub temperature_increment: Vec<f64>,
    pub cape_background: f64,
    pub cape_analysis: f64,
    pub h_background: f64,
    pub h_analysis: f64,
    pub qc_status: QcStatus,
    /// Absent when the CAPE gate stopped the retrieval before minimisation.
    pub minimize_report: Option<MinimizeReport<f64>>,
    pub error: Option<String>,
}

impl RetrievalResult {
    pub fn analysis_temperature(&self) -> Vec<f64> {
        self.background_temperature.iter().zip(&self.temperature_increment).map(|(b, d)| b + d).collect()
    }

    pub fn innovation_before(&self) -> f64 {
        self.obs.flash_rate - self.h_background
    }

    pub fn innovation_after(&self) -> f64 {
        self.obs.flash_rate - self.h_analysis
    }
}

/// The QC verdict for a retrieval outcome.
pub fn classify(
    cape_background: f64,
    report: Option<&MinimizeReport<f64>>,
    h_background: f64,
    h_analysis: f64,
    params: &LightningOperatorParams<f64>,
    config: &RetrievalConfig,
) -> QcStatus {
    if cape_background <= params.cape_min {
        return QcStatus::RejectedLowCape;
    }
    match report {
        Some(r) if r.status == MinimizeStatus::Converged => {}
        _ => return QcStatus::RejectedNonconvergence,
    }
    if h_analysis - h_background < config.min_improvement {
        QcStatus::RejectedSmallImprovement
    } else {
        QcStatus::Accepted
    }
}

/// Cost and gradient of the column retrieval in absolute temperature.
pub struct ColumnCost<'a> {
    background: &'a AtmosColumn<f64>,
    bcov: &'a VerticalCovariance,
    params: &'a LightningOperatorParams<f64>,
    obs: f64,
    sigma0: f64,
}

impl<'a> ColumnCost<'a> {
    pub fn new(
        background: &'a AtmosColumn<f64>,
        obs: &LightningObservation,
        bcov: &'a VerticalCovariance,
        params: &'a LightningOperatorParams<f64>,
    ) -> Result<Self> {
        if bcov.n_levels() != background.n_levels() {
            return Err(Error::ShapeMismatch(format!(
                "covariance has {} levels, column has {}",
                bcov.n_levels(),
                background.n_levels()
            )));
        }
        obs.validate()?;
        Ok(Self { background, bcov, params, obs: obs.flash_rate, sigma0: obs.sigma0 })
    }

    pub fn evaluate(&self, temperature: &[f64], gradient: &mut [f64]) -> Result<f64> {
        let column = self.background.with_temperature(temperature.to_vec())?;
        let lin = linearize_cape(&column)?;
        let cape = lin.diagnostics.cape;
        let h = self.params.flash_rate_extended(cape);
        let residual = (h - self.obs) / (self.sigma0 * self.sigma0);
        let slope = self.params.flash_rate_derivative(cape) * residual;

        let delta: Vec<f64> = temperature.iter().zip(self.background.temperature()).map(|(x, b)| x - b).collect();
        let b_inv_delta = self.bcov.pseudo_inverse_apply(&delta);
        let obs_grad: Vec<f64> = lin.gradient.iter().map(|g| g * slope).collect();
        let obs_grad = self.bcov.project_to_range(&obs_grad);

        let jb = 0.5 * delta.iter().zip(&b_inv_delta).map(|(a, b)| a * b).sum::<f64>();
        let jo = 0.5 * (h - self.obs).powi(2) / (self.sigma0 * self.sigma0);
        for (g, (a, b)) in gradient.iter_mut().zip(b_inv_delta.iter().zip(&obs_grad)) {
            *g = a + b;
        }
        Ok(jb + jo)
    }
}

pub fn retrieve_column(
    background: &AtmosColumn<f64>,
    obs: &LightningObservation,
    bcov: &VerticalCovariance,
    params: &LightningOperatorParams<f64>,
) -> Result<RetrievalResult> {
    retrieve_column_with(background, obs, bcov, params, &RetrievalConfig::default())
}

pub fn retrieve_column_with(
    background: &AtmosColumn<f64>,
    obs: &LightningObservation,
    bcov: &VerticalCovariance,
    params: &LightningOperatorParams<f64>,
    config: &RetrievalConfig,
) -> Result<RetrievalResult> {
    let cost = ColumnCost::new(background, obs, bcov, params)?;
    let n = background.n_levels();
    let cape_b = compute_cape(background)?.cape;
    let h_b = params.flash_rate_extended(cape_b);
    let mut result = RetrievalResult {
        obs: *obs,
        background_temperature: background.temperature().to_vec(),
        temperature_increment: vec![0.0; n],
        cape_background: cape_b,
        cape_analysis: cape_b,
        h_background: h_b,
        h_analysis: h_b,
        qc_status: QcStatus::RejectedLowCape,
        minimize_report: None,
        error: None,
    };
    if cape_b <= params.cape_min {
        return Ok(result);
    }

    let problem = MinimizeProblem::new(n)
        .with_max_iterations(config.max_iterations)
        .with_gradient_target(config.gradient_reduction)
        .with_bounds(Bounds::uniform(n, MIN_TEMPERATURE, MAX_TEMPERATURE));
    let mut objective = |x: &[f64], g: &mut [f64]| cost.evaluate(x, g).unwrap_or(f64::NAN);
    match conmin_cg(&problem, &mut objective, background.temperature()) {
        Ok((x, report)) => {
            let analysis = background.with_temperature(x.clone())?;
            let cape_a = compute_cape(&analysis)?.cape;
            result.temperature_increment = x.iter().zip(background.temperature()).map(|(a, b)| a - b).collect();
            result.cape_analysis = cape_a;
            result.h_analysis = params.flash_rate_extended(cape_a);
            result.minimize_report = Some(report);
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result.qc_status = classify(cape_b, result.minimize_report.as_ref(), h_b, result.h_analysis, params, config);
    Ok(result)
}

/// An accepted, vertically adjusted retrieval to be assimilated as a
/// conventional temperature sounding.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PseudoObservation {
    pub i: usize,
    pub j: usize,
    pub time_min: f64,
    pub temperature: Vec<f64>,
    pub error_std: Vec<f64>,
}

/// Keeps accepted retrievals (re-checking each verdict), removes
/// super-adiabatic layers, and attaches the per-level error std.
pub fn qc_filter(
    results: &[RetrievalResult],
    template: &AtmosColumn<f64>,
    params: &LightningOperatorParams<f64>,
    config: &RetrievalConfig,
) -> Result<Vec<PseudoObservation>> {
    let mut out = Vec::new();
    for r in results {
        let status = classify(r.cape_background, r.minimize_report.as_ref(), r.h_background, r.h_analysis, params, config);
        if status != QcStatus::Accepted {
            continue;
        }
        let adjusted = dry_adiabatic_adjust(&template.with_temperature(r.analysis_temperature())?)?;
        out.push(PseudoObservation {
            i: r.obs.i,
            j: r.obs.j,
            time_min: r.obs.time_min,
            temperature: adjusted.temperature().to_vec(),
            error_std: vec![config.pseudo_obs_std; adjusted.n_levels()],
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BatchSummary {
    pub presented: usize,
    pub accepted: usize,
    pub rejected_low_cape: usize,
    pub rejected_small_improvement: usize,
    pub rejected_nonconvergence: usize,
    pub skipped_nonpositive_innovation: usize,
    pub failed: usize,
    /// Over accepted retrievals; `None` when nothing was accepted.
    pub max_innovation_before: Option<f64>,
    pub max_innovation_after: Option<f64>,
    pub mean_innovation_before: Option<f64>,
    pub mean_innovation_after: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SkippedObservation {
    pub obs: LightningObservation,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BatchOutput {
    /// Sorted by `(j, i, time)`.
    pub results: Vec<RetrievalResult>,
    pub skipped: Vec<SkippedObservation>,
    pub summary: BatchSummary,
}

enum Outcome {
    Retrieved(Box<RetrievalResult>),
    NonPositive(LightningObservation),
    Failed(LightningObservation, String),
}

fn retrieve_one(
    grid: &GridState,
    obs: &LightningObservation,
    bcov: &VerticalCovariance,
    params: &LightningOperatorParams<f64>,
    config: &RetrievalConfig,
) -> Outcome {
    let attempt = || -> Result<Outcome> {
        obs.validate()?;
        let column = grid.column(obs.i, obs.j)?;
        let cape = compute_cape(&column)?.cape;
        if cape > params.cape_min && obs.flash_rate <= params.flash_rate_extended(cape) {
            return Ok(Outcome::NonPositive(*obs));
        }
        Ok(Outcome::Retrieved(Box::new(retrieve_column_with(&column, obs, bcov, params, config)?)))
    };
    attempt().unwrap_or_else(|e| Outcome::Failed(*obs, format!("{}: {e}", e.category())))
}

/// Retrieves every observation independently (in parallel). Observations
/// whose innovation is not positive are skipped; failures are recorded and
/// never abort the batch.
pub fn batch_retrieve(
    grid: &GridState,
    observations: &[LightningObservation],
    bcov: &VerticalCovariance,
    params: &LightningOperatorParams<f64>,
    config: &RetrievalConfig,
) -> BatchOutput {
    let outcomes: Vec<Outcome> = observations.par_iter().map(|o| retrieve_one(grid, o, bcov, params, config)).collect();
    let mut out = BatchOutput::default();
    for outcome in outcomes {
        match outcome {
            Outcome::Retrieved(r) => out.results.push(*r),
            Outcome::NonPositive(obs) => {
                out.summary.skipped_nonpositive_innovation += 1;
                out.skipped.push(SkippedObservation { obs, reason: "non-positive innovation".into() });
            }
            Outcome::Failed(obs, reason) => {
                out.summary.failed += 1;
                out.skipped.push(SkippedObservation { obs, reason });
            }
        }
    }
    let key = |o: &LightningObservation| (o.j, o.i, o.time_min.to_bits(), o.flash_rate.to_bits());
    out.results.sort_by_key(|r| key(&r.obs));
    out.skipped.sort_by_key(|s| key(&s.obs));

    let s = &mut out.summary;
    s.presented = observations.len();
    let mut before = Vec::new();
    let mut after = Vec::new();
    for r in &out.results {
        match r.qc_status {
            QcStatus::Accepted => {
                s.accepted += 1;
                before.push(r.innovation_before());
                after.push(r.innovation_after().abs());
            }
            QcStatus::RejectedLowCape => s.rejected_low_cape += 1,
            QcStatus::RejectedSmallImprovement => s.rejected_small_improvement += 1,
            QcStatus::RejectedNonconvergence => s.rejected_nonconvergence += 1,
        }
    }
    let max = |v: &[f64]| v.iter().copied().reduce(f64::max);
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    s.max_innovation_before = max(&before);
    s.max_innovation_after = max(&after);
    s.mean_innovation_before = mean(&before);
    s.mean_innovation_after = mean(&after);
    out
}

/// Summary table rows `i,j,qc_status,h_bg,h_an,iters` with a header.
pub fn summary_table(results: &[RetrievalResult]) -> String {
    let mut s = String::from("i,j,qc_status,h_bg,h_an,iters\n");
    for r in results {
        let iters = r.minimize_report.as_ref().map_or(0, |m| m.iterations_used);
        s.push_str(&format!("{},{},{},{:.6},{:.6},{}\n", r.obs.i, r.obs.j, r.qc_status.as_str(), r.h_background, r.h_analysis, iters));
    }
    s
}
