//! Linear stand-in forecast model on a periodic grid of columns.
//!
//! One step advects temperature and mixing ratio with first-order upwind
//! differences (x sweep then y sweep) and relaxes both toward a reference
//! profile. The map is affine, so its tangent-linear is its linear part.
//! An optional quadratic temperature term breaks linearity for outer-loop
//! experiments.

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thermo::AtmosColumn;

/// Fields are stored `(level, y, x)`; a cell `(i, j)` is column `x = i`, `y = j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState {
    pressure: Vec<f64>,
    height: Vec<f64>,
    pub temperature: Array3<f64>,
    pub mixing_ratio: Array3<f64>,
}

impl GridState {
    pub fn new(pressure: Vec<f64>, height: Vec<f64>, temperature: Array3<f64>, mixing_ratio: Array3<f64>) -> Result<Self> {
        let nl = pressure.len();
        if height.len() != nl || temperature.len_of(Axis(0)) != nl || temperature.dim() != mixing_ratio.dim() {
            return Err(Error::ShapeMismatch(format!(
                "grid fields disagree: {} pressures, {} heights, T {:?}, q {:?}",
                nl,
                height.len(),
                temperature.dim(),
                mixing_ratio.dim()
            )));
        }
        if temperature.is_empty() {
            return Err(Error::ShapeMismatch("empty grid".into()));
        }
        Ok(Self { pressure, height, temperature, mixing_ratio })
    }

    pub fn n_levels(&self) -> usize {
        self.pressure.len()
    }
    pub fn nx(&self) -> usize {
        self.temperature.len_of(Axis(2))
    }
    pub fn ny(&self) -> usize {
        self.temperature.len_of(Axis(1))
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        self.temperature.dim()
    }
    pub fn pressure(&self) -> &[f64] {
        &self.pressure
    }
    pub fn height(&self) -> &[f64] {
        &self.height
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.nx() && j < self.ny()
    }

    fn check_cell(&self, i: usize, j: usize) -> Result<()> {
        if !self.contains(i, j) {
            return Err(Error::ShapeMismatch(format!("cell ({i}, {j}) outside {}x{} grid", self.nx(), self.ny())));
        }
        Ok(())
    }

    pub fn temperature_column(&self, i: usize, j: usize) -> Vec<f64> {
        self.temperature.slice(ndarray::s![.., j, i]).to_vec()
    }

    pub fn mixing_ratio_column(&self, i: usize, j: usize) -> Vec<f64> {
        self.mixing_ratio.slice(ndarray::s![.., j, i]).to_vec()
    }

    pub fn column(&self, i: usize, j: usize) -> Result<AtmosColumn<f64>> {
        self.check_cell(i, j)?;
        AtmosColumn::new(
            self.pressure.clone(),
            self.temperature_column(i, j),
            self.mixing_ratio_column(i, j),
            self.height.clone(),
        )
    }

    pub fn set_temperature_column(&mut self, i: usize, j: usize, values: &[f64]) -> Result<()> {
        self.check_cell(i, j)?;
        if values.len() != self.n_levels() {
            return Err(Error::ShapeMismatch(format!("expected {} levels, got {}", self.n_levels(), values.len())));
        }
        self.temperature.slice_mut(ndarray::s![.., j, i]).iter_mut().zip(values).for_each(|(d, &v)| *d = v);
        Ok(())
    }

    pub fn with_temperature_increment(&self, increment: ArrayView3<f64>) -> Result<Self> {
        if increment.dim() != self.shape() {
            return Err(Error::ShapeMismatch(format!("increment {:?} vs grid {:?}", increment.dim(), self.shape())));
        }
        let mut out = self.clone();
        out.temperature += &increment;
        Ok(out)
    }

    /// Horizontal mean of each level.
    pub fn mean_profile(&self) -> ReferenceState {
        let mean = |a: &Array3<f64>| a.mean_axis(Axis(2)).and_then(|m| m.mean_axis(Axis(1))).map(|m| m.to_vec()).unwrap_or_default();
        ReferenceState { temperature: mean(&self.temperature), mixing_ratio: mean(&self.mixing_ratio) }
    }
}

/// A perturbation of the prognostic fields.
#[derive(Clone, Debug, PartialEq)]
pub struct GridIncrement {
    pub temperature: Array3<f64>,
    pub mixing_ratio: Array3<f64>,
}

impl GridIncrement {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self { temperature: Array3::zeros(shape), mixing_ratio: Array3::zeros(shape) }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        let d = |a: &Array3<f64>, b: &Array3<f64>| Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + x * y);
        d(&self.temperature, &other.temperature) + d(&self.mixing_ratio, &other.mixing_ratio)
    }
}

/// Per-level relaxation target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceState {
    pub temperature: Vec<f64>,
    pub mixing_ratio: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Cells per step.
    pub wind_u: f64,
    pub wind_v: f64,
    /// Seconds.
    pub dt: f64,
    /// Fraction of the departure from the reference removed per step.
    pub relaxation_rate: f64,
    pub steps_per_hour: usize,
    /// Coefficient of the optional `(T - T_ref)^2` tendency, K^-1 per step.
    pub quadratic_coefficient: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            wind_u: 0.25,
            wind_v: 0.1,
            dt: 600.0,
            relaxation_rate: 0.01,
            steps_per_hour: 6,
            quadratic_coefficient: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.wind_u.abs() <= 1.0 && self.wind_v.abs() <= 1.0) {
            return Err(Error::InvalidParameter("wind must not exceed one cell per step".into()));
        }
        if !(0.0..1.0).contains(&self.relaxation_rate) {
            return Err(Error::InvalidParameter("relaxation_rate must lie in [0, 1)".into()));
        }
        if !(self.dt > 0.0) || self.steps_per_hour == 0 {
            return Err(Error::InvalidParameter("dt and steps_per_hour must be positive".into()));
        }
        if !self.quadratic_coefficient.is_finite() {
            return Err(Error::NonFinite("quadratic_coefficient".into()));
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.quadratic_coefficient == 0.0
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ModelConfig,
    reference: ReferenceState,
}

/// Upwind sweep along `axis` with `c` cells per step.
fn sweep(field: &mut Array3<f64>, axis: Axis, c: f64) {
    if c == 0.0 {
        return;
    }
    let (w_self, w_up) = (1.0 - c.abs(), c.abs());
    let mut buf = Vec::new();
    for mut lane in field.lanes_mut(axis) {
        buf.clear();
        buf.extend(lane.iter().copied());
        let n = buf.len();
        for (k, v) in lane.iter_mut().enumerate() {
            let up = if c > 0.0 { (k + n - 1) % n } else { (k + 1) % n };
            *v = w_self * buf[k] + w_up * buf[up];
        }
    }
}

/// Transpose of [`sweep`].
fn sweep_adjoint(field: &mut Array3<f64>, axis: Axis, c: f64) {
    sweep(field, axis, -c);
}

impl ToyModel {
    pub fn new(config: ModelConfig, reference: ReferenceState) -> Result<Self> {
        config.validate()?;
        if reference.temperature.len() != reference.mixing_ratio.len() {
            return Err(Error::ShapeMismatch("reference profiles differ in length".into()));
        }
        Ok(Self { config, reference })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn reference(&self) -> &ReferenceState {
        &self.reference
    }

    fn check_levels(&self, n: usize) -> Result<()> {
        if n != self.reference.temperature.len() {
            return Err(Error::ShapeMismatch(format!(
                "state has {n} levels, reference has {}",
                self.reference.temperature.len()
            )));
        }
        Ok(())
    }

    fn advect(&self, field: &Array3<f64>) -> Array3<f64> {
        let mut out = field.clone();
        sweep(&mut out, Axis(2), self.config.wind_u);
        sweep(&mut out, Axis(1), self.config.wind_v);
        out
    }

    fn advect_adjoint(&self, field: &Array3<f64>) -> Array3<f64> {
        let mut out = field.clone();
        sweep_adjoint(&mut out, Axis(1), self.config.wind_v);
        sweep_adjoint(&mut out, Axis(2), self.config.wind_u);
        out
    }

    fn relax(&self, field: &mut Array3<f64>, reference: &[f64]) {
        let r = self.config.relaxation_rate;
        for (mut level, &target) in field.axis_iter_mut(Axis(0)).zip(reference) {
            level.mapv_inplace(|v| v - r * (v - target));
        }
    }

    /// Temperature after advection and relaxation, before the quadratic term.
    fn pre_quadratic_temperature(&self, temperature: &Array3<f64>) -> Array3<f64> {
        let mut t = self.advect(temperature);
        self.relax(&mut t, &self.reference.temperature);
        t
    }

    /// `1 + 2 gamma (T - T_ref)` at each point of the pre-quadratic base field.
    fn quadratic_slope(&self, base_temperature: &Array3<f64>) -> Array3<f64> {
        let gamma = self.config.quadratic_coefficient;
        let mut slope = self.pre_quadratic_temperature(base_temperature);
        for (mut level, &target) in slope.axis_iter_mut(Axis(0)).zip(&self.reference.temperature) {
            level.mapv_inplace(|v| 1.0 + 2.0 * gamma * (v - target));
        }
        slope
    }

    pub fn step(&self, state: &GridState) -> Result<GridState> {
        self.check_levels(state.n_levels())?;
        let mut t = self.pre_quadratic_temperature(&state.temperature);
        let gamma = self.config.quadratic_coefficient;
        if gamma != 0.0 {
            for (mut level, &target) in t.axis_iter_mut(Axis(0)).zip(&self.reference.temperature) {
                level.mapv_inplace(|v| v + gamma * (v - target).powi(2));
            }
        }
        let mut q = self.advect(&state.mixing_ratio);
        self.relax(&mut q, &self.reference.mixing_ratio);
        Ok(GridState { temperature: t, mixing_ratio: q, ..state.clone() })
    }

    /// Tangent-linear of one step of a temperature perturbation about `base`.
    /// `base` is only consulted when the quadratic term is on.
    pub fn step_tl_temperature(&self, base: &Array3<f64>, d: &Array3<f64>) -> Array3<f64> {
        let mut out = self.advect(d);
        out *= 1.0 - self.config.relaxation_rate;
        if !self.config.is_linear() {
            out *= &self.quadratic_slope(base);
        }
        out
    }

    pub fn step_adjoint_temperature(&self, base: &Array3<f64>, d_star: &Array3<f64>) -> Array3<f64> {
        let mut a = d_star.clone();
        if !self.config.is_linear() {
            a *= &self.quadratic_slope(base);
        }
        a *= 1.0 - self.config.relaxation_rate;
        self.advect_adjoint(&a)
    }

    pub fn step_tl(&self, base: &GridState, d: &GridIncrement) -> GridIncrement {
        let mut q = self.advect(&d.mixing_ratio);
        q *= 1.0 - self.config.relaxation_rate;
        GridIncrement { temperature: self.step_tl_temperature(&base.temperature, &d.temperature), mixing_ratio: q }
    }

    pub fn step_adjoint(&self, base: &GridState, d_star: &GridIncrement) -> GridIncrement {
        let mut q = d_star.mixing_ratio.clone() * (1.0 - self.config.relaxation_rate);
        q = self.advect_adjoint(&q);
        GridIncrement { temperature: self.step_adjoint_temperature(&base.temperature, &d_star.temperature), mixing_ratio: q }
    }

    /// Trajectory of `n_steps + 1` states including the initial one.
    pub fn integrate(&self, state: &GridState, n_steps: usize) -> Result<Vec<GridState>> {
        let mut traj = Vec::with_capacity(n_steps + 1);
        traj.push(state.clone());
        for k in 0..n_steps {
            let next = self.step(&traj[k])?;
            traj.push(next);
        }
        Ok(traj)
    }

    /// TL of `n_steps` steps along `trajectory` (which must hold at least
    /// `n_steps` states; ignored for the linear model).
    pub fn propagate_tl_temperature(&self, trajectory: &[GridState], d: &Array3<f64>, n_steps: usize) -> Array3<f64> {
        let mut out = d.clone();
        for k in 0..n_steps {
            let base = trajectory.get(k).map(|s| &s.temperature).unwrap_or(d);
            out = self.step_tl_temperature(base, &out);
        }
        out
    }

    pub fn propagate_adjoint_temperature(&self, trajectory: &[GridState], d_star: &Array3<f64>, n_steps: usize) -> Array3<f64> {
        let mut out = d_star.clone();
        for k in (0..n_steps).rev() {
            let base = trajectory.get(k).map(|s| &s.temperature).unwrap_or(d_star);
            out = self.step_adjoint_temperature(base, &out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(nl: usize, ny: usize, nx: usize) -> GridState {
        let t = Array3::from_shape_fn((nl, ny, nx), |(l, j, i)| 290.0 - 5.0 * l as f64 + (i as f64 * 0.7).sin() + 0.3 * j as f64);
        let q = Array3::from_shape_fn((nl, ny, nx), |(l, j, i)| 0.01 / (1.0 + l as f64) * (1.0 + 0.1 * ((i + 2 * j) as f64).cos()));
        let p = (0..nl).map(|l| 100_000.0 - 10_000.0 * l as f64).collect();
        let z = (0..nl).map(|l| 900.0 * l as f64).collect();
        GridState::new(p, z, t, q).unwrap()
    }

    fn model(u: f64, v: f64, r: f64, s: &GridState) -> ToyModel {
        let cfg = ModelConfig { wind_u: u, wind_v: v, relaxation_rate: r, ..Default::default() };
        ToyModel::new(cfg, s.mean_profile()).unwrap()
    }

    #[test]
    fn uniform_state_is_steady_without_relaxation() {
        let mut s = state(3, 4, 5);
        s.temperature.fill(280.0);
        s.mixing_ratio.fill(0.005);
        let m = model(0.3, -0.4, 0.0, &s);
        let out = m.step(&s).unwrap();
        assert!(Zip::from(&out.temperature).and(&s.temperature).all(|a, b| (a - b).abs() < 1e-12));
        assert!(Zip::from(&out.mixing_ratio).and(&s.mixing_ratio).all(|a, b| (a - b).abs() < 1e-15));
    }

    #[test]
    fn unit_wind_shifts_by_one_cell() {
        let s = state(2, 4, 5);
        let m = model(1.0, 0.0, 0.0, &s);
        let out = m.step(&s).unwrap();
        for i in 0..5 {
            let src = (i + 4) % 5;
            assert_eq!(out.temperature_column(i, 2), s.temperature_column(src, 2));
        }
    }

    #[test]
    fn advection_conserves_mean() {
        let s = state(3, 6, 7);
        let m = model(0.37, 0.61, 0.0, &s);
        let before = s.temperature.sum();
        let after = m.step(&s).unwrap().temperature.sum();
        assert!((before - after).abs() / before < 1e-14);
    }

    #[test]
    fn invalid_config_rejected() {
        let s = state(2, 2, 2);
        let bad = ModelConfig { wind_u: 1.5, ..Default::default() };
        assert!(ToyModel::new(bad, s.mean_profile()).is_err());
        let bad = ModelConfig { relaxation_rate: 1.0, ..Default::default() };
        assert!(ToyModel::new(bad, s.mean_profile()).is_err());
    }

    #[test]
    fn zero_steps_returns_initial() {
        let s = state(2, 3, 3);
        let traj = model(0.2, 0.2, 0.1, &s).integrate(&s, 0).unwrap();
        assert_eq!(traj, vec![s]);
    }

    #[test]
    fn tl_is_exact_difference() {
        let s = state(3, 5, 4);
        let m = model(0.3, -0.2, 0.05, &s);
        let mut d = GridIncrement::zeros(s.shape());
        d.temperature[(1, 2, 3)] = 1.5;
        d.mixing_ratio[(0, 0, 0)] = 1e-3;
        let pert = GridState { temperature: &s.temperature + &d.temperature, mixing_ratio: &s.mixing_ratio + &d.mixing_ratio, ..s.clone() };
        let diff_t = m.step(&pert).unwrap().temperature - m.step(&s).unwrap().temperature;
        let tl = m.step_tl(&s, &d);
        assert!(Zip::from(&diff_t).and(&tl.temperature).all(|a, b| (a - b).abs() < 1e-10));
    }

    #[test]
    fn quadratic_tl_matches_finite_difference() {
        let s = state(2, 3, 4);
        let cfg = ModelConfig { quadratic_coefficient: 0.01, ..Default::default() };
        let m = ToyModel::new(cfg, s.mean_profile()).unwrap();
        let d = Array3::from_shape_fn(s.shape(), |(l, j, i)| ((l + 2 * j + 3 * i) as f64).sin());
        let h = 1e-5;
        let plus = GridState { temperature: &s.temperature + &(&d * h), ..s.clone() };
        let minus = GridState { temperature: &s.temperature - &(&d * h), ..s.clone() };
        let fd = (m.step(&plus).unwrap().temperature - m.step(&minus).unwrap().temperature) / (2.0 * h);
        let tl = m.step_tl_temperature(&s.temperature, &d);
        assert!(Zip::from(&fd).and(&tl).all(|a, b| (a - b).abs() < 1e-6));
    }
}
