//! Experiment configuration read from TOML. Every threshold is a key; a
//! missing key takes the default shown by `ExperimentConfig::default()`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs_operator::LightningOperatorParams;
use crate::osse::{GridConfig, NmcSampleConfig, OsseConfig, ScenarioConfig, SoundingConfig};
use crate::toy_model::ModelConfig;
use crate::var1d::RetrievalConfig;
use crate::var_nd::{Scheme, VarConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarianceSection {
    /// Fraction of vertical variance kept by the EOF truncation.
    pub mode_fraction: f64,
    /// Recursive-filter lengthscale, grid cells.
    pub horizontal_lengthscale: f64,
    pub filter_passes: usize,
}

impl Default for CovarianceSection {
    fn default() -> Self {
        Self { mode_fraction: 0.99, horizontal_lengthscale: 4.0, filter_passes: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSection {
    pub coefficient: f64,
    pub slope: f64,
    pub offset: f64,
    pub exponent: f64,
    pub cape_min: f64,
    /// Flash-rate observation error std.
    pub sigma0: f64,
}

impl Default for OperatorSection {
    fn default() -> Self {
        let p = LightningOperatorParams::<f64>::default();
        Self {
            coefficient: p.coefficient,
            slope: p.slope,
            offset: p.offset,
            exponent: p.exponent,
            cape_min: p.cape_min,
            sigma0: 1.0,
        }
    }
}

impl OperatorSection {
    pub fn params(&self) -> LightningOperatorParams<f64> {
        LightningOperatorParams {
            coefficient: self.coefficient,
            slope: self.slope,
            offset: self.offset,
            exponent: self.exponent,
            cape_min: self.cape_min,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeSection {
    pub name: Scheme,
    pub n_cycles: usize,
    pub cycle_hours: usize,
    pub max_iterations: usize,
    pub gradient_reduction: f64,
    pub outer_loops: usize,
}

impl Default for SchemeSection {
    fn default() -> Self {
        let v = VarConfig::default();
        Self {
            name: Scheme::OneDFourDVar,
            n_cycles: 7,
            cycle_hours: 1,
            max_iterations: v.max_iterations,
            gradient_reduction: v.gradient_reduction,
            outer_loops: v.outer_loops,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    /// The 1d4dvar window holds slots at hours `0..=hours` after its start.
    pub hours: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self { hours: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcSection {
    pub min_improvement: f64,
    pub innovation_cap: f64,
    pub pseudo_obs_std: f64,
    pub retrieval_max_iterations: usize,
    pub retrieval_gradient_reduction: f64,
}

impl Default for QcSection {
    fn default() -> Self {
        let r = RetrievalConfig::default();
        Self {
            min_improvement: r.min_improvement,
            innovation_cap: VarConfig::default().innovation_cap,
            pseudo_obs_std: r.pseudo_obs_std,
            retrieval_max_iterations: r.max_iterations,
            retrieval_gradient_reduction: r.gradient_reduction,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OsseSection {
    pub sounding: SoundingConfig,
    pub scenario: OsseConfig,
    pub nmc: NmcSampleConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub covariance: CovarianceSection,
    pub operator: OperatorSection,
    pub scheme: SchemeSection,
    pub window: WindowSection,
    pub qc: QcSection,
    pub osse: OsseSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            grid: GridConfig::default(),
            model: ModelConfig::default(),
            covariance: CovarianceSection::default(),
            operator: OperatorSection::default(),
            scheme: SchemeSection::default(),
            window: WindowSection::default(),
            qc: QcSection::default(),
            osse: OsseSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model.validate()?;
        self.osse.scenario.validate()?;
        self.operator.params().validate()?;
        let positive = [
            ("operator.sigma0", self.operator.sigma0),
            ("qc.min_improvement", self.qc.min_improvement),
            ("qc.innovation_cap", self.qc.innovation_cap),
            ("qc.pseudo_obs_std", self.qc.pseudo_obs_std),
            ("qc.retrieval_gradient_reduction", self.qc.retrieval_gradient_reduction),
            ("scheme.gradient_reduction", self.scheme.gradient_reduction),
            ("covariance.horizontal_lengthscale", self.covariance.horizontal_lengthscale),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.covariance.mode_fraction > 0.0 && self.covariance.mode_fraction <= 1.0) {
            return Err(Error::InvalidParameter("covariance.mode_fraction must lie in (0, 1]".into()));
        }
        let counts = [
            ("covariance.filter_passes", self.covariance.filter_passes),
            ("scheme.cycle_hours", self.scheme.cycle_hours),
            ("scheme.max_iterations", self.scheme.max_iterations),
            ("scheme.outer_loops", self.scheme.outer_loops),
            ("qc.retrieval_max_iterations", self.qc.retrieval_max_iterations),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{key} must be at least 1")));
            }
        }
        let needed = self.scheme.n_cycles.saturating_sub(1) * self.scheme.cycle_hours;
        if needed > self.osse.scenario.hours {
            return Err(Error::InvalidParameter(format!(
                "{} cycles of {} h need {} h of truth, scenario has {}",
                self.scheme.n_cycles, self.scheme.cycle_hours, needed, self.osse.scenario.hours
            )));
        }
        Ok(())
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            grid: self.grid,
            sounding: self.osse.sounding,
            osse: self.osse.scenario,
            nmc: self.osse.nmc,
            model: self.model,
        }
    }

    pub fn var_config(&self) -> VarConfig {
        VarConfig {
            max_iterations: self.scheme.max_iterations,
            gradient_reduction: self.scheme.gradient_reduction,
            outer_loops: self.scheme.outer_loops,
            innovation_cap: self.qc.innovation_cap,
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            max_iterations: self.qc.retrieval_max_iterations,
            gradient_reduction: self.qc.retrieval_gradient_reduction,
            min_improvement: self.qc.min_improvement,
            pseudo_obs_std: self.qc.pseudo_obs_std,
        }
    }
}
