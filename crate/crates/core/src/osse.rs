//! Synthetic twin-experiment scenarios: a truth grid with convectively
//! unstable regions, a displaced and low-level-cooled background, flash-rate
//! observations drawn from the truth, and forecast-difference samples for
//! the NMC covariance estimate. Everything is reproducible from the seed.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::ForecastPairSet;
use crate::error::{Error, Result};
use crate::obs_operator::LightningOperatorParams;
use crate::thermo::constants::{GRAVITY, RD};
use crate::thermo::compute_cape;
use crate::toy_model::{GridState, ModelConfig, ToyModel};
use crate::var1d::LightningObservation;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub n_levels: usize,
    /// Level spacing, m.
    pub dz: f64,
    pub surface_pressure: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nx: 30, ny: 30, n_levels: 60, dz: 300.0, surface_pressure: 100_000.0 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.n_levels < 2 {
            return Err(Error::InvalidParameter("grid needs nx, ny >= 1 and at least 2 levels".into()));
        }
        if !(self.dz > 0.0 && self.surface_pressure > 0.0) {
            return Err(Error::InvalidParameter("dz and surface_pressure must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoundingConfig {
    /// K.
    pub surface_temperature: f64,
    /// K m^-1.
    pub lapse_rate: f64,
    /// m.
    pub tropopause_height: f64,
    /// kg kg^-1.
    pub stable_surface_mixing_ratio: f64,
    pub unstable_surface_mixing_ratio_min: f64,
    pub unstable_surface_mixing_ratio_max: f64,
    /// Warmer surface in unstable cells, K at full strength.
    pub unstable_surface_warming: f64,
    /// Moisture e-folding height, m.
    pub moisture_scale_height: f64,
}

impl Default for SoundingConfig {
    fn default() -> Self {
        Self {
            surface_temperature: 300.0,
            lapse_rate: 0.0065,
            tropopause_height: 12_000.0,
            stable_surface_mixing_ratio: 0.006,
            unstable_surface_mixing_ratio_min: 0.020,
            unstable_surface_mixing_ratio_max: 0.0235,
            unstable_surface_warming: 3.0,
            moisture_scale_height: 2500.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OsseConfig {
    /// Fraction of cells whose truth CAPE exceeds the threshold.
    pub unstable_fraction: f64,
    /// Number of random Fourier modes in the instability field.
    pub field_modes: usize,
    /// Largest wavenumber of the instability field.
    pub max_wavenumber: usize,
    pub background_shift_x: isize,
    pub background_shift_y: isize,
    /// Low-level cooling of the background at the surface, K.
    pub background_cooling: f64,
    /// Depth over which the cooling tapers to zero, m.
    pub cooling_depth: f64,
    pub obs_per_hour: usize,
    /// Flash-rate noise std.
    pub obs_noise_std: f64,
    pub hours: usize,
}

impl Default for OsseConfig {
    fn default() -> Self {
        Self {
            unstable_fraction: 0.3,
            field_modes: 6,
            max_wavenumber: 2,
            background_shift_x: 1,
            background_shift_y: 0,
            background_cooling: 2.7,
            cooling_depth: 1500.0,
            obs_per_hour: 50,
            obs_noise_std: 0.1,
            hours: 7,
        }
    }
}

impl OsseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.unstable_fraction > 0.0 && self.unstable_fraction < 1.0) {
            return Err(Error::InvalidParameter("unstable_fraction must lie in (0, 1)".into()));
        }
        if self.field_modes == 0 || self.max_wavenumber == 0 {
            return Err(Error::InvalidParameter("instability field needs at least one mode".into()));
        }
        if !(self.obs_noise_std >= 0.0 && self.cooling_depth > 0.0) {
            return Err(Error::InvalidParameter("noise std must be >= 0 and cooling depth > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationShape {
    /// `exp(-r / L)`.
    Exponential,
    /// `(1 + r / L) exp(-r / L)`.
    #[default]
    Soar,
    /// `exp(-r^2 / (2 L^2))`.
    Gaussian,
}

impl CorrelationShape {
    pub fn correlation(&self, r: f64, length: f64) -> f64 {
        let x = r / length;
        match self {
            CorrelationShape::Exponential => (-x).exp(),
            CorrelationShape::Soar => (1.0 + x) * (-x).exp(),
            CorrelationShape::Gaussian => (-0.5 * x * x).exp(),
        }
    }
}

/// Synthetic forecast-difference statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmcSampleConfig {
    pub samples: usize,
    /// Vertical correlation length, levels.
    pub correlation_levels: f64,
    pub correlation_shape: CorrelationShape,
    /// Background error std at the surface and far aloft, K; the excess over
    /// `top_std` decays with e-folding depth `std_decay_levels`.
    pub surface_std: f64,
    pub top_std: f64,
    pub std_decay_levels: f64,
    pub coupling_start: usize,
    pub coupling_end: usize,
    /// Weight of the shared mode added across the coupling block.
    pub coupling_strength: f64,
}

impl Default for NmcSampleConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            correlation_levels: 3.0,
            correlation_shape: CorrelationShape::Soar,
            surface_std: 1.5,
            top_std: 0.4,
            std_decay_levels: 8.0,
            coupling_start: 10,
            coupling_end: 25,
            coupling_strength: 0.5,
        }
    }
}

impl NmcSampleConfig {
    /// The background error covariance the samples are drawn to reproduce.
    pub fn target_covariance(&self, n_levels: usize) -> DMatrix<f64> {
        let sd: Vec<f64> = (0..n_levels)
            .map(|l| self.top_std + (self.surface_std - self.top_std) * (-(l as f64) / self.std_decay_levels).exp())
            .collect();
        let in_block = |l: usize| l >= self.coupling_start && l <= self.coupling_end;
        DMatrix::from_fn(n_levels, n_levels, |i, j| {
            let shared = if in_block(i) && in_block(j) { self.coupling_strength } else { 0.0 };
            sd[i] * sd[j] * (self.correlation_shape.correlation((i as f64 - j as f64).abs(), self.correlation_levels) + shared)
        })
    }
}

/// Hydrostatic levels for a reference lapse-rate atmosphere.
pub fn standard_levels(grid: &GridConfig, sounding: &SoundingConfig) -> (Vec<f64>, Vec<f64>) {
    let height: Vec<f64> = (0..grid.n_levels).map(|k| k as f64 * grid.dz).collect();
    let reference = sounding_temperature(sounding.surface_temperature, sounding, &height);
    let mut pressure = vec![grid.surface_pressure; grid.n_levels];
    for k in 1..grid.n_levels {
        let t_mean = 0.5 * (reference[k] + reference[k - 1]);
        pressure[k] = pressure[k - 1] * (-GRAVITY * (height[k] - height[k - 1]) / (RD * t_mean)).exp();
    }
    (pressure, height)
}

fn sounding_temperature(surface_t: f64, s: &SoundingConfig, height: &[f64]) -> Vec<f64> {
    height.iter().map(|&z| surface_t - s.lapse_rate * z.min(s.tropopause_height)).collect()
}

/// Temperature and mixing ratio of a sounding whose instability strength is
/// `strength` in [0, 1] (0 = stable).
pub fn sounding(strength: f64, s: &SoundingConfig, height: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let unstable = strength > 0.0;
    let surface_t = s.surface_temperature + if unstable { s.unstable_surface_warming * strength } else { 0.0 };
    let q0 = if unstable {
        s.unstable_surface_mixing_ratio_min + (s.unstable_surface_mixing_ratio_max - s.unstable_surface_mixing_ratio_min) * strength
    } else {
        s.stable_surface_mixing_ratio
    };
    let t = sounding_temperature(surface_t, s, height);
    let q = height.iter().map(|&z| q0 * (-z / s.moisture_scale_height).exp()).collect();
    (t, q)
}

/// Smooth periodic random field of unit-order amplitude.
fn smooth_field(nx: usize, ny: usize, modes: usize, kmax: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let tau = std::f64::consts::TAU;
    let comps: Vec<(f64, f64, f64, f64)> = (0..modes)
        .map(|_| {
            let kx = rng.random_range(0..=kmax) as f64;
            let ky = rng.random_range(if kx == 0.0 { 1 } else { 0 }..=kmax) as f64;
            (kx, ky, rng.random::<f64>() * tau, 0.5 + rng.random::<f64>())
        })
        .collect();
    Array2::from_shape_fn((ny, nx), |(j, i)| {
        comps
            .iter()
            .map(|&(kx, ky, ph, a)| a * (tau * (kx * i as f64 / nx as f64 + ky * j as f64 / ny as f64) + ph).cos())
            .sum::<f64>()
            + 1e-9 * rng_free_jitter(i, j)
    })
}

/// Deterministic tie-breaker so quantile thresholds split cells exactly.
fn rng_free_jitter(i: usize, j: usize) -> f64 {
    ((i * 7919 + j * 104_729) % 1000) as f64 / 1000.0
}

/// Per-cell instability strength: zero in stable cells, `(0, 1]` in exactly
/// `round(fraction * cells)` unstable ones.
fn strength_field(field: &Array2<f64>, fraction: f64) -> Array2<f64> {
    let mut sorted: Vec<f64> = field.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let n_unstable = ((fraction * n as f64).round() as usize).clamp(1, n);
    let threshold = sorted[n - n_unstable];
    let peak = sorted[n - 1];
    let span = (peak - threshold).max(f64::MIN_POSITIVE);
    field.mapv(|v| if v >= threshold { 0.25 + 0.75 * (v - threshold) / span } else { 0.0 })
}

/// The generated twin experiment.
#[derive(Clone, Debug)]
pub struct Osse {
    /// Truth at each hour `0..=hours`.
    pub truth: Vec<GridState>,
    /// Background valid at hour 0.
    pub background: GridState,
    /// Observations per hour `0..=hours`.
    pub observations: Vec<Vec<LightningObservation>>,
    pub nmc_samples: ForecastPairSet,
    pub model: ToyModel,
    pub strength: Array2<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub sounding: SoundingConfig,
    pub osse: OsseConfig,
    pub nmc: NmcSampleConfig,
    pub model: ModelConfig,
}

/// Truth grid at hour 0 and its instability strength.
pub fn truth_state(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<(GridState, Array2<f64>)> {
    let g = &cfg.grid;
    let (pressure, height) = standard_levels(g, &cfg.sounding);
    let field = smooth_field(g.nx, g.ny, cfg.osse.field_modes, cfg.osse.max_wavenumber, rng);
    let strength = strength_field(&field, cfg.osse.unstable_fraction);
    let mut t = Array3::zeros((g.n_levels, g.ny, g.nx));
    let mut q = Array3::zeros((g.n_levels, g.ny, g.nx));
    for ((j, i), &s) in strength.indexed_iter() {
        let (tc, qc) = sounding(s, &cfg.sounding, &height);
        for l in 0..g.n_levels {
            t[(l, j, i)] = tc[l];
            q[(l, j, i)] = qc[l];
        }
    }
    Ok((GridState::new(pressure, height, t, q)?, strength))
}

/// Shifts the truth periodically and cools the low levels.
pub fn background_from_truth(truth: &GridState, cfg: &OsseConfig) -> GridState {
    let (nl, ny, nx) = truth.shape();
    let sx = cfg.background_shift_x.rem_euclid(nx as isize) as usize;
    let sy = cfg.background_shift_y.rem_euclid(ny as isize) as usize;
    let height = truth.height();
    let shift = |a: &Array3<f64>| Array3::from_shape_fn((nl, ny, nx), |(l, j, i)| a[(l, (j + ny - sy) % ny, (i + nx - sx) % nx)]);
    let mut bg = truth.clone();
    bg.temperature = shift(&truth.temperature);
    bg.mixing_ratio = shift(&truth.mixing_ratio);
    for l in 0..nl {
        let taper = (1.0 - height[l] / cfg.cooling_depth).max(0.0);
        let cool = cfg.background_cooling * taper;
        bg.temperature.index_axis_mut(ndarray::Axis(0), l).mapv_inplace(|v| v - cool);
    }
    bg
}

/// Flash-rate observations at up to `count` cells whose truth CAPE exceeds
/// the threshold.
pub fn synthesize_observations(
    truth: &GridState,
    count: usize,
    noise_std: f64,
    time_min: f64,
    params: &LightningOperatorParams<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LightningObservation>> {
    let mut lightning = Vec::new();
    for j in 0..truth.ny() {
        for i in 0..truth.nx() {
            let cape = compute_cape(&truth.column(i, j)?)?.cape;
            if cape > params.cape_min {
                lightning.push((i, j, params.flash_rate_extended(cape)));
            }
        }
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let picks = sample(rng, lightning.len(), count.min(lightning.len())).into_vec();
    let mut picks = picks;
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|k| {
            let (i, j, h) = lightning[k];
            let e = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            LightningObservation::new(i, j, (h + e).max(0.0), time_min)
        })
        .collect())
}

/// Forecast-difference samples whose NMC estimate targets `cov`.
pub fn nmc_samples(cov: &DMatrix<f64>, count: usize, rng: &mut ChaCha8Rng) -> Result<ForecastPairSet> {
    let n = cov.nrows();
    // Differences carry twice the background error covariance.
    let chol = (cov * 2.0)
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("target covariance is not positive definite".into()))?;
    let l = chol.l();
    let samples = (0..count)
        .map(|_| {
            let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
            (&l * z).iter().copied().collect()
        })
        .collect();
    ForecastPairSet::new(samples)
}

pub fn generate_osse(cfg: &ScenarioConfig, seed: u64, params: &LightningOperatorParams<f64>) -> Result<Osse> {
    cfg.grid.validate()?;
    cfg.osse.validate()?;
    cfg.model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (truth0, strength) = truth_state(cfg, &mut rng)?;
    let model = ToyModel::new(cfg.model, truth0.mean_profile())?;
    let steps = cfg.model.steps_per_hour;
    let mut truth = vec![truth0];
    for _ in 0..cfg.osse.hours {
        let next = model.integrate(truth.last().expect("non-empty"), steps)?.pop().expect("trajectory");
        truth.push(next);
    }
    let background = background_from_truth(&truth[0], &cfg.osse);
    let observations = truth
        .iter()
        .enumerate()
        .map(|(h, t)| synthesize_observations(t, cfg.osse.obs_per_hour, cfg.osse.obs_noise_std, 60.0 * h as f64, params, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let target = cfg.nmc.target_covariance(cfg.grid.n_levels);
    let nmc = nmc_samples(&target, cfg.nmc.samples, &mut rng)?;
    Ok(Osse { truth, background, observations, nmc_samples: nmc, model, strength })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strength_field_hits_fraction_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = smooth_field(20, 10, 6, 2, &mut rng);
        let s = strength_field(&f, 0.3);
        assert_eq!(s.iter().filter(|&&v| v > 0.0).count(), 60);
    }

    #[test]
    fn levels_are_monotone() {
        let (p, z) = standard_levels(&GridConfig::default(), &SoundingConfig::default());
        assert!(p.windows(2).all(|w| w[1] < w[0]));
        assert!(z.windows(2).all(|w| w[1] > w[0]));
    }
}
