//! A configured twin experiment: the synthetic scenario, its NMC covariance
//! and CVT, and drivers for retrieval batches, cycling and scoring.

use crate::config::ExperimentConfig;
use crate::covariance::{factor_vertical_sqrt, nmc_vertical_covariance, Cvt, CvtSpec, VerticalCovariance};
use crate::error::{Error, Result};
use crate::obs_operator::LightningOperatorParams;
use crate::osse::{generate_osse, Osse};
use crate::toy_model::GridState;
use crate::var1d::{batch_retrieve, BatchOutput};
use crate::var_nd::{cycle, CycleContext, CycleOutput, Scheme};
use crate::verify::{rmse, ScoreSeries};

pub struct Experiment {
    pub config: ExperimentConfig,
    pub osse: Osse,
    pub params: LightningOperatorParams<f64>,
    pub bcov: VerticalCovariance,
    pub cvt: Cvt,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let params = config.operator.params();
        let mut osse = generate_osse(&config.scenario(), config.seed, &params)?;
        for obs in osse.observations.iter_mut().flatten() {
            obs.sigma0 = config.operator.sigma0;
        }
        let bcov = nmc_vertical_covariance(&osse.nmc_samples)?;
        let sqrt = factor_vertical_sqrt(&bcov, config.covariance.mode_fraction)?;
        let spec = CvtSpec::new(sqrt, config.covariance.horizontal_lengthscale, config.covariance.filter_passes);
        let cvt = Cvt::new(spec, config.grid.nx, config.grid.ny)?;
        Ok(Self { config: *config, osse, params, bcov, cvt })
    }

    pub fn context(&self) -> CycleContext<'_> {
        CycleContext {
            cvt: &self.cvt,
            model: &self.osse.model,
            bcov: &self.bcov,
            params: &self.params,
            var: self.config.var_config(),
            retrieval: self.config.retrieval_config(),
            window_hours: self.config.window.hours,
        }
    }

    /// 1D-VAR batch over the observations valid at `hour`, retrieved on `state`.
    pub fn retrieval_batch(&self, state: &GridState, hour: usize) -> Result<BatchOutput> {
        let obs = self
            .osse
            .observations
            .get(hour)
            .ok_or_else(|| Error::InvalidParameter(format!("no observations for hour {hour}")))?;
        Ok(batch_retrieve(state, obs, &self.bcov, &self.params, &self.config.retrieval_config()))
    }

    /// Background forecast without assimilation, one state per cycle.
    pub fn free_run(&self) -> Result<Vec<GridState>> {
        let steps = self.config.scheme.cycle_hours * self.config.model.steps_per_hour;
        let mut states = vec![self.osse.background.clone()];
        for _ in 1..self.config.scheme.n_cycles {
            let next = self.osse.model.integrate(states.last().expect("non-empty"), steps)?.pop().expect("trajectory");
            states.push(next);
        }
        Ok(states)
    }

    pub fn run(&self, scheme: Scheme) -> Result<CycleOutput> {
        cycle(
            &self.osse.background,
            &self.osse.observations,
            scheme,
            self.config.scheme.n_cycles,
            self.config.scheme.cycle_hours,
            &self.context(),
        )
    }

    pub fn truth_at(&self, hour: usize) -> Result<&GridState> {
        self.osse.truth.get(hour).ok_or_else(|| Error::InvalidParameter(format!("no truth for hour {hour}")))
    }

    /// Temperature RMSE against truth at each `(hour, state)`.
    pub fn score<'a>(&self, label: &str, states: impl IntoIterator<Item = (usize, &'a GridState)>) -> Result<ScoreSeries> {
        let mut series = ScoreSeries::new(label);
        for (hour, state) in states {
            let truth = self.truth_at(hour)?;
            series.push(hour as f64, rmse(state.temperature.view(), truth.temperature.view())?)?;
        }
        Ok(series)
    }

    pub fn score_free_run(&self) -> Result<ScoreSeries> {
        let free = self.free_run()?;
        let hours = self.config.scheme.cycle_hours;
        self.score("free", free.iter().enumerate().map(|(c, s)| (c * hours, s)))
    }

    pub fn score_cycle(&self, output: &CycleOutput) -> Result<ScoreSeries> {
        self.score(output.scheme.as_str(), output.records.iter().map(|r| (r.hour, &r.state)))
    }

    /// Hours inside the 1d4dvar window.
    pub fn window_hours(&self) -> Vec<usize> {
        let n = self.config.window.hours.min(self.config.scheme.n_cycles.saturating_sub(1));
        (0..=n).map(|c| c * self.config.scheme.cycle_hours).collect()
    }
}
