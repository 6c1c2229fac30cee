//! `manifest.json`: what a run read, wrote, checked and concluded.

use std::path::Path;

use lightda::{Error, ExperimentConfig};
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Thresholds {
    pub min_improvement: f64,
    pub innovation_cap: f64,
    pub cape_min: f64,
    pub sigma0: f64,
    pub pseudo_obs_std: f64,
    pub retrieval_gradient_reduction: f64,
    pub gradient_reduction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_path: Option<String>,
    pub config: ExperimentConfig,
    pub thresholds: Thresholds,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
    pub results: Map<String, Value>,
    pub exit_status: u8,
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, config_path: Option<&Path>) -> Self {
        Self {
            tool: "lightda",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            config: *config,
            thresholds: Thresholds {
                min_improvement: config.qc.min_improvement,
                innovation_cap: config.qc.innovation_cap,
                cape_min: config.operator.cape_min,
                sigma0: config.operator.sigma0,
                pseudo_obs_std: config.qc.pseudo_obs_std,
                retrieval_gradient_reduction: config.qc.retrieval_gradient_reduction,
                gradient_reduction: config.scheme.gradient_reduction,
            },
            inputs: Vec::new(),
            outputs: Vec::new(),
            checks: Vec::new(),
            results: Map::new(),
            exit_status: 0,
            error: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
