//! Incremental 3D-VAR and 4D-VAR in control-variable space, and the hourly
//! cycling drivers.
//!
//! With `dx = U v` and `d_k` the innovations at the linearisation state,
//!
//! ```text
//! J(v) = 1/2 v^T v + 1/2 sum_k (H_k M_k U v - d_k)^T R_k^-1 (H_k M_k U v - d_k)
//! grad = v + sum_k U^T M_k^T H_k^T R_k^-1 (H_k M_k U v - d_k)
//! ```
//!
//! Observations are reduced to rows: a cell, a linear functional of that
//! cell's temperature column, an innovation and an error variance. Pseudo
//! temperature observations select one level; flash-rate observations use
//! the frozen-switch operator gradient.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::covariance::{Cvt, VerticalCovariance};
use crate::error::{Error, Result};
use crate::minimizer::{conmin_cg, MinimizeProblem, MinimizeReport, MinimizeStatus};
use crate::obs_operator::LightningOperatorParams;
use crate::real::{dot, norm};
use crate::thermo::{compute_cape, linearize_cape};
use crate::toy_model::{GridState, ToyModel};
use crate::var1d::{batch_retrieve, qc_filter, LightningObservation, PseudoObservation, RetrievalConfig};
use crate::verify::{innovation_stats, uniform_bins, InnovationStats};

#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector {
    values: Vec<f64>,
}

impl ControlVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("control vector".into()));
        }
        Ok(Self { values })
    }
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowOperator {
    /// Temperature at one level.
    Level(usize),
    /// Weighted sum over the column's levels.
    Profile(Vec<f64>),
}

/// One scalar observation, linearised.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsRow {
    pub i: usize,
    pub j: usize,
    pub operator: RowOperator,
    pub innovation: f64,
    pub variance: f64,
}

impl ObsRow {
    fn apply(&self, field: &Array3<f64>) -> f64 {
        match &self.operator {
            RowOperator::Level(l) => field[(*l, self.j, self.i)],
            RowOperator::Profile(w) => w.iter().enumerate().map(|(l, wl)| wl * field[(l, self.j, self.i)]).sum(),
        }
    }

    fn accumulate_adjoint(&self, scale: f64, field: &mut Array3<f64>) {
        match &self.operator {
            RowOperator::Level(l) => field[(*l, self.j, self.i)] += scale,
            RowOperator::Profile(w) => {
                for (l, wl) in w.iter().enumerate() {
                    field[(l, self.j, self.i)] += scale * wl;
                }
            }
        }
    }
}

/// Rows valid `step` model steps after the window start.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotRows {
    pub step: usize,
    pub rows: Vec<ObsRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SlotObservations {
    Pseudo(Vec<PseudoObservation>),
    Lightning(Vec<LightningObservation>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSlot {
    /// Model steps after the window start.
    pub step: usize,
    pub observations: SlotObservations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssimilationWindow {
    pub start_time_min: f64,
    pub slots: Vec<WindowSlot>,
}

impl AssimilationWindow {
    pub fn single(observations: SlotObservations) -> Self {
        Self { start_time_min: 0.0, slots: vec![WindowSlot { step: 0, observations }] }
    }

    pub fn validate(&self, grid: &GridState) -> Result<()> {
        if self.slots.windows(2).any(|w| w[1].step <= w[0].step) {
            return Err(Error::InvalidParameter("window slots must be strictly time-ordered".into()));
        }
        for slot in &self.slots {
            let cells: Vec<(usize, usize)> = match &slot.observations {
                SlotObservations::Pseudo(p) => p.iter().map(|o| (o.i, o.j)).collect(),
                SlotObservations::Lightning(l) => l.iter().map(|o| (o.i, o.j)).collect(),
            };
            if let Some((i, j)) = cells.into_iter().find(|&(i, j)| !grid.contains(i, j)) {
                return Err(Error::ShapeMismatch(format!("observation cell ({i}, {j}) outside the grid")));
            }
            if let SlotObservations::Pseudo(p) = &slot.observations {
                for o in p {
                    if o.temperature.len() != grid.n_levels() || o.error_std.len() != grid.n_levels() {
                        return Err(Error::ShapeMismatch("pseudo-observation column length".into()));
                    }
                    if o.error_std.iter().any(|&s| !(s > 0.0)) {
                        return Err(Error::InvalidParameter("pseudo-observation error std must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn max_step(&self) -> usize {
        self.slots.iter().map(|s| s.step).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarConfig {
    pub max_iterations: usize,
    pub gradient_reduction: f64,
    pub outer_loops: usize,
    /// Flash-rate innovations above this are not assimilated.
    pub innovation_cap: f64,
}

impl Default for VarConfig {
    fn default() -> Self {
        Self { max_iterations: 500, gradient_reduction: 1e-8, outer_loops: 1, innovation_cap: 10.0 }
    }
}

/// Why flash-rate observations were not assimilated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExclusionReport {
    pub presented: usize,
    pub assimilated: usize,
    pub low_cape: usize,
    pub nonpositive_innovation: usize,
    pub capped: usize,
}

#[derive(Clone, Debug)]
pub struct AnalysisResult {
    pub analysis: GridState,
    pub increment: Array3<f64>,
    pub control: ControlVector,
    /// Cost at every accepted inner iterate, outer loops concatenated.
    pub cost_history: Vec<f64>,
    pub innovation_before: InnovationStats<f64>,
    pub innovation_after: InnovationStats<f64>,
    pub outer_loops_used: usize,
    pub status: MinimizeStatus,
    pub reports: Vec<MinimizeReport<f64>>,
    /// The minimisation failed and the background was returned.
    pub fell_back: bool,
    pub exclusions: Option<ExclusionReport>,
}

/// Incremental cost in control space, linearised about a fixed trajectory.
pub struct IncrementalProblem<'a> {
    cvt: &'a Cvt,
    model: Option<&'a ToyModel>,
    trajectory: &'a [GridState],
    slots: &'a [SlotRows],
    /// Control vector of the linearisation state.
    v_ref: &'a [f64],
}

impl<'a> IncrementalProblem<'a> {
    pub fn new(
        cvt: &'a Cvt,
        model: Option<&'a ToyModel>,
        trajectory: &'a [GridState],
        slots: &'a [SlotRows],
        v_ref: &'a [f64],
    ) -> Result<Self> {
        if v_ref.len() != cvt.control_len() {
            return Err(Error::ShapeMismatch("reference control vector length".into()));
        }
        if slots.iter().any(|s| s.step > 0) && model.is_none() {
            return Err(Error::InvalidParameter("slots after the window start need a model".into()));
        }
        if slots.windows(2).any(|w| w[1].step <= w[0].step) {
            return Err(Error::InvalidParameter("slots must be strictly time-ordered".into()));
        }
        Ok(Self { cvt, model, trajectory, slots, v_ref })
    }

    pub fn cost_grad(&self, v: &[f64], gradient: &mut [f64]) -> Result<f64> {
        let n = self.cvt.control_len();
        if v.len() != n || gradient.len() != n {
            return Err(Error::ShapeMismatch(format!("control length {} / gradient {} vs {n}", v.len(), gradient.len())));
        }
        let dv: Vec<f64> = v.iter().zip(self.v_ref).map(|(a, b)| a - b).collect();
        let mut dx = self.cvt.apply(&dv)?;
        let mut jo = 0.0;
        let mut forcings = Vec::with_capacity(self.slots.len());
        let mut step = 0;
        for slot in self.slots {
            if slot.step > step {
                let model = self.model.expect("checked in new");
                dx = model.propagate_tl_temperature(&self.trajectory[step..], &dx, slot.step - step);
                step = slot.step;
            }
            let weights: Vec<f64> = slot
                .rows
                .iter()
                .map(|row| {
                    let r = row.apply(&dx) - row.innovation;
                    jo += 0.5 * r * r / row.variance;
                    r / row.variance
                })
                .collect();
            forcings.push(weights);
        }

        let mut lambda = Array3::<f64>::zeros(self.cvt.grid_shape());
        let mut step = self.slots.last().map_or(0, |s| s.step);
        for (slot, weights) in self.slots.iter().zip(&forcings).rev() {
            if slot.step < step {
                let model = self.model.expect("checked in new");
                lambda = model.propagate_adjoint_temperature(&self.trajectory[slot.step..], &lambda, step - slot.step);
                step = slot.step;
            }
            for (row, &w) in slot.rows.iter().zip(weights) {
                row.accumulate_adjoint(w, &mut lambda);
            }
        }
        if step > 0 {
            let model = self.model.expect("checked in new");
            lambda = model.propagate_adjoint_temperature(self.trajectory, &lambda, step);
        }
        let vg = self.cvt.adjoint(&lambda)?;
        for (g, (a, b)) in gradient.iter_mut().zip(v.iter().zip(&vg)) {
            *g = a + b;
        }
        let cost = 0.5 * dot(v, v) + jo;
        if !cost.is_finite() {
            return Err(Error::NonFinite("incremental cost".into()));
        }
        Ok(cost)
    }
}

pub fn incremental_cost_grad(v: &ControlVector, problem: &IncrementalProblem<'_>) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; v.len()];
    let cost = problem.cost_grad(v.values(), &mut g)?;
    Ok((cost, g))
}

/// Flash-rate observations kept for assimilation by the QC gates, and the
/// accounting of the rest. Gates in order: CAPE threshold, positive
/// innovation, innovation cap.
pub fn screen_lightning(
    state: &GridState,
    obs: &[LightningObservation],
    params: &LightningOperatorParams<f64>,
    innovation_cap: f64,
) -> Result<(Vec<LightningObservation>, ExclusionReport)> {
    let mut report = ExclusionReport { presented: obs.len(), ..Default::default() };
    let mut kept = Vec::new();
    for o in obs {
        let cape = compute_cape(&state.column(o.i, o.j)?)?.cape;
        let innovation = o.flash_rate - params.flash_rate_extended(cape);
        if cape <= params.cape_min {
            report.low_cape += 1;
        } else if innovation <= 0.0 {
            report.nonpositive_innovation += 1;
        } else if innovation > innovation_cap {
            report.capped += 1;
        } else {
            report.assimilated += 1;
            kept.push(*o);
        }
    }
    Ok((kept, report))
}

fn lightning_row(state: &GridState, o: &LightningObservation, params: &LightningOperatorParams<f64>) -> Result<ObsRow> {
    let lin = linearize_cape(&state.column(o.i, o.j)?)?;
    let cape = lin.diagnostics.cape;
    let slope = params.flash_rate_derivative(cape);
    Ok(ObsRow {
        i: o.i,
        j: o.j,
        operator: RowOperator::Profile(lin.gradient.iter().map(|g| g * slope).collect()),
        innovation: o.flash_rate - params.flash_rate_extended(cape),
        variance: o.sigma0 * o.sigma0,
    })
}

fn pseudo_rows(state: &GridState, o: &PseudoObservation) -> Vec<ObsRow> {
    let column = state.temperature_column(o.i, o.j);
    (0..state.n_levels())
        .map(|l| ObsRow {
            i: o.i,
            j: o.j,
            operator: RowOperator::Level(l),
            innovation: o.temperature[l] - column[l],
            variance: o.error_std[l] * o.error_std[l],
        })
        .collect()
}

/// Observed values and their nonlinear model equivalents at `trajectory`.
fn model_equivalents(
    window: &AssimilationWindow,
    trajectory: &[GridState],
    params: &LightningOperatorParams<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y = Vec::new();
    let mut hx = Vec::new();
    for slot in &window.slots {
        let state = &trajectory[slot.step];
        match &slot.observations {
            SlotObservations::Pseudo(p) => {
                for o in p {
                    y.extend_from_slice(&o.temperature);
                    hx.extend(state.temperature_column(o.i, o.j));
                }
            }
            SlotObservations::Lightning(l) => {
                for o in l {
                    y.push(o.flash_rate);
                    hx.push(params.flash_rate_extended(compute_cape(&state.column(o.i, o.j)?)?.cape));
                }
            }
        }
    }
    Ok((y, hx))
}

fn build_rows(
    window: &AssimilationWindow,
    trajectory: &[GridState],
    params: &LightningOperatorParams<f64>,
) -> Result<Vec<SlotRows>> {
    let mut slots = Vec::with_capacity(window.slots.len());
    for slot in &window.slots {
        let state = &trajectory[slot.step];
        let rows = match &slot.observations {
            SlotObservations::Pseudo(p) => p.iter().flat_map(|o| pseudo_rows(state, o)).collect(),
            SlotObservations::Lightning(l) => l.iter().map(|o| lightning_row(state, o, params)).collect::<Result<_>>()?,
        };
        slots.push(SlotRows { step: slot.step, rows });
    }
    Ok(slots)
}

fn trajectory_from(background: &GridState, model: Option<&ToyModel>, increment: &Array3<f64>, steps: usize) -> Result<Vec<GridState>> {
    let start = background.with_temperature_increment(increment.view())?;
    match model {
        Some(m) => m.integrate(&start, steps),
        None if steps == 0 => Ok(vec![start]),
        None => Err(Error::InvalidParameter("a model is required for a multi-slot window".into())),
    }
}

fn stats(y: &[f64], hx: &[f64]) -> Result<InnovationStats<f64>> {
    let spread = y.iter().zip(hx).map(|(a, b)| (a - b).abs()).fold(1.0, f64::max);
    innovation_stats(y, hx, &uniform_bins(-spread, spread, 20))
}

/// Minimises the incremental cost for `window`, relinearising in each outer
/// loop. Flash-rate slots must already be screened.
pub fn analyze_window(
    background: &GridState,
    window: &AssimilationWindow,
    cvt: &Cvt,
    model: Option<&ToyModel>,
    params: &LightningOperatorParams<f64>,
    config: &VarConfig,
) -> Result<AnalysisResult> {
    window.validate(background)?;
    if cvt.grid_shape() != background.shape() {
        return Err(Error::ShapeMismatch(format!("CVT grid {:?} vs background {:?}", cvt.grid_shape(), background.shape())));
    }
    let steps = window.max_step();
    let n = cvt.control_len();
    let zero = Array3::zeros(background.shape());
    let bg_traj = trajectory_from(background, model, &zero, steps)?;
    let (y, hx_b) = model_equivalents(window, &bg_traj, params)?;
    let innovation_before = stats(&y, &hx_b)?;

    let mut v = vec![0.0; n];
    let mut reports = Vec::new();
    let mut cost_history = Vec::new();
    let mut status = MinimizeStatus::Converged;
    let mut fell_back = false;
    let mut loops = 0;
    let mut traj = bg_traj.clone();
    for outer in 0..config.outer_loops.max(1) {
        if outer > 0 {
            traj = trajectory_from(background, model, &cvt.apply(&v)?, steps)?;
        }
        let slots = build_rows(window, &traj, params)?;
        let v_ref = v.clone();
        let problem = IncrementalProblem::new(cvt, model, &traj, &slots, &v_ref)?;
        let mut objective = |x: &[f64], g: &mut [f64]| problem.cost_grad(x, g).unwrap_or(f64::NAN);
        let setup = MinimizeProblem::new(n)
            .with_max_iterations(config.max_iterations)
            .with_gradient_target(config.gradient_reduction);
        loops += 1;
        match conmin_cg(&setup, &mut objective, &v_ref) {
            Ok((x, report)) if report.cost_final < report.cost_initial || report.grad_norm_initial == 0.0 => {
                cost_history.extend(report.history.iter().map(|r| r.cost));
                status = report.status;
                reports.push(report);
                v = x;
            }
            Ok((_, report)) => {
                cost_history.extend(report.history.iter().map(|r| r.cost));
                status = report.status;
                reports.push(report);
                fell_back = true;
                break;
            }
            Err(_) => {
                status = MinimizeStatus::LineSearchFailure;
                fell_back = true;
                break;
            }
        }
    }
    if fell_back {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    let increment = cvt.apply(&v)?;
    let analysis = background.with_temperature_increment(increment.view())?;
    let an_traj = trajectory_from(background, model, &increment, steps)?;
    let (_, hx_a) = model_equivalents(window, &an_traj, params)?;
    Ok(AnalysisResult {
        analysis,
        increment,
        control: ControlVector::new(v)?,
        cost_history,
        innovation_before,
        innovation_after: stats(&y, &hx_a)?,
        outer_loops_used: loops,
        status,
        reports,
        fell_back,
        exclusions: None,
    })
}

/// Direct flash-rate 3D-VAR with the CAPE, sign and cap gates.
pub fn analyze_3dvar_direct(
    background: &GridState,
    obs: &[LightningObservation],
    cvt: &Cvt,
    params: &LightningOperatorParams<f64>,
    config: &VarConfig,
) -> Result<AnalysisResult> {
    let (kept, report) = screen_lightning(background, obs, params, config.innovation_cap)?;
    let window = AssimilationWindow::single(SlotObservations::Lightning(kept));
    let mut result = analyze_window(background, &window, cvt, None, params, config)?;
    result.exclusions = Some(report);
    Ok(result)
}

pub fn analyze_3dvar_pseudo(
    background: &GridState,
    pseudo: &[PseudoObservation],
    cvt: &Cvt,
    config: &VarConfig,
) -> Result<AnalysisResult> {
    let window = AssimilationWindow::single(SlotObservations::Pseudo(pseudo.to_vec()));
    analyze_window(background, &window, cvt, None, &LightningOperatorParams::default(), config)
}

/// 4D-VAR over `window`; flash-rate slots are screened against the
/// background forecast at their time.
pub fn analyze_4dvar(
    background: &GridState,
    window: &AssimilationWindow,
    cvt: &Cvt,
    model: &ToyModel,
    params: &LightningOperatorParams<f64>,
    config: &VarConfig,
) -> Result<AnalysisResult> {
    window.validate(background)?;
    let traj = model.integrate(background, window.max_step())?;
    let mut screened = window.clone();
    let mut total: Option<ExclusionReport> = None;
    for slot in &mut screened.slots {
        if let SlotObservations::Lightning(l) = &slot.observations {
            let (kept, r) = screen_lightning(&traj[slot.step], l, params, config.innovation_cap)?;
            let t = total.get_or_insert_with(ExclusionReport::default);
            t.presented += r.presented;
            t.assimilated += r.assimilated;
            t.low_cape += r.low_cape;
            t.nonpositive_innovation += r.nonpositive_innovation;
            t.capped += r.capped;
            slot.observations = SlotObservations::Lightning(kept);
        }
    }
    let mut result = analyze_window(background, &screened, cvt, Some(model), params, config)?;
    result.exclusions = total;
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "3dvar_direct")]
    ThreeDVarDirect,
    #[serde(rename = "1d3dvar")]
    OneDThreeDVar,
    #[serde(rename = "1d4dvar")]
    OneDFourDVar,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::ThreeDVarDirect, Scheme::OneDThreeDVar, Scheme::OneDFourDVar];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::ThreeDVarDirect => "3dvar_direct",
            Scheme::OneDThreeDVar => "1d3dvar",
            Scheme::OneDFourDVar => "1d4dvar",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme '{s}' (3dvar_direct, 1d3dvar, 1d4dvar)")))
    }
}

/// Everything a cycle needs besides the background and observations.
pub struct CycleContext<'a> {
    pub cvt: &'a Cvt,
    pub model: &'a ToyModel,
    pub bcov: &'a VerticalCovariance,
    pub params: &'a LightningOperatorParams<f64>,
    pub var: VarConfig,
    pub retrieval: RetrievalConfig,
    /// Slots of the 1d4dvar window, hours after its start.
    pub window_hours: usize,
}

#[derive(Clone, Debug)]
pub struct CycleRecord {
    pub hour: usize,
    pub background: GridState,
    /// Analysis, or the forecast from the window analysis for hours inside
    /// and after a 4D-VAR window.
    pub state: GridState,
    pub analysed: bool,
    pub fell_back: bool,
    pub pseudo_obs: usize,
    pub exclusions: Option<ExclusionReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CycleOutput {
    pub scheme: Scheme,
    pub records: Vec<CycleRecord>,
    /// Free forecast one cycle beyond the last record.
    pub final_forecast: GridState,
}

fn pseudo_at(state: &GridState, obs: &[LightningObservation], ctx: &CycleContext<'_>) -> Result<Vec<PseudoObservation>> {
    let batch = batch_retrieve(state, obs, ctx.bcov, ctx.params, &ctx.retrieval);
    let template = state.column(0, 0)?;
    qc_filter(&batch.results, &template, ctx.params, &ctx.retrieval)
}

/// One analysis of `scheme` at a single time: direct lightning 3D-VAR or
/// 1D-VAR pseudo-observations assimilated by 3D-VAR. Returns the number of
/// pseudo-observations used.
pub fn hourly_analysis(
    background: &GridState,
    obs: &[LightningObservation],
    scheme: Scheme,
    ctx: &CycleContext<'_>,
) -> Result<(AnalysisResult, usize)> {
    match scheme {
        Scheme::ThreeDVarDirect => Ok((analyze_3dvar_direct(background, obs, ctx.cvt, ctx.params, &ctx.var)?, 0)),
        _ => {
            let p = pseudo_at(background, obs, ctx)?;
            Ok((analyze_3dvar_pseudo(background, &p, ctx.cvt, &ctx.var)?, p.len()))
        }
    }
}

/// The 1d4dvar window analysis valid at `initial`'s time. Pseudo-observations
/// are retrieved on the background trajectory at every hour of the window;
/// slots where nothing is accepted are dropped.
pub fn window_analysis(
    initial: &GridState,
    obs_by_hour: &[Vec<LightningObservation>],
    window_hours: usize,
    cycle_hours: usize,
    ctx: &CycleContext<'_>,
) -> Result<(AnalysisResult, usize)> {
    let steps_per_hour = ctx.model.config().steps_per_hour;
    let bg_traj = ctx.model.integrate(initial, window_hours * cycle_hours * steps_per_hour)?;
    let mut slots = Vec::new();
    let mut n_pseudo = 0;
    for h in 0..=window_hours {
        let step = h * cycle_hours * steps_per_hour;
        let obs = obs_by_hour.get(h * cycle_hours).map(Vec::as_slice).unwrap_or(&[]);
        let p = pseudo_at(&bg_traj[step], obs, ctx)?;
        if !p.is_empty() {
            n_pseudo += p.len();
            slots.push(WindowSlot { step, observations: SlotObservations::Pseudo(p) });
        }
    }
    let window = AssimilationWindow { start_time_min: 0.0, slots };
    Ok((analyze_window(initial, &window, ctx.cvt, Some(ctx.model), ctx.params, &ctx.var)?, n_pseudo))
}

/// Runs `n_cycles` hourly analyses (or one 4D-VAR window followed by a free
/// forecast). `obs_by_hour[h]` holds the observations valid at hour `h`.
pub fn cycle(
    initial: &GridState,
    obs_by_hour: &[Vec<LightningObservation>],
    scheme: Scheme,
    n_cycles: usize,
    cycle_hours: usize,
    ctx: &CycleContext<'_>,
) -> Result<CycleOutput> {
    if cycle_hours == 0 {
        return Err(Error::InvalidParameter("cycle_hours must be positive".into()));
    }
    let steps_per_cycle = cycle_hours * ctx.model.config().steps_per_hour;
    let advance = |s: &GridState| -> Result<GridState> { Ok(ctx.model.integrate(s, steps_per_cycle)?.pop().expect("trajectory")) };
    let mut records = Vec::with_capacity(n_cycles);
    let mut background = initial.clone();
    let failed = |hour: usize, background: &GridState, e: Error| CycleRecord {
        hour,
        background: background.clone(),
        state: background.clone(),
        analysed: false,
        fell_back: true,
        pseudo_obs: 0,
        exclusions: None,
        error: Some(format!("{}: {e}", e.category())),
    };

    if scheme == Scheme::OneDFourDVar && n_cycles > 0 {
        let window_hours = ctx.window_hours.min(n_cycles - 1);
        let first = match window_analysis(initial, obs_by_hour, window_hours, cycle_hours, ctx) {
            Ok((r, n_pseudo)) => CycleRecord {
                hour: 0,
                background: initial.clone(),
                state: r.analysis,
                analysed: true,
                fell_back: r.fell_back,
                pseudo_obs: n_pseudo,
                exclusions: None,
                error: None,
            },
            Err(e) => failed(0, initial, e),
        };
        let mut state = first.state.clone();
        records.push(first);
        for c in 1..n_cycles {
            state = advance(&state)?;
            background = advance(&background)?;
            records.push(CycleRecord {
                hour: c * cycle_hours,
                background: background.clone(),
                state: state.clone(),
                analysed: false,
                fell_back: false,
                pseudo_obs: 0,
                exclusions: None,
                error: None,
            });
        }
        return Ok(CycleOutput { scheme, records, final_forecast: advance(&state)? });
    }

    for c in 0..n_cycles {
        let hour = c * cycle_hours;
        let obs = obs_by_hour.get(hour).map(Vec::as_slice).unwrap_or(&[]);
        let record = match hourly_analysis(&background, obs, scheme, ctx) {
            Ok((r, n_pseudo)) => CycleRecord {
                hour,
                background: background.clone(),
                state: r.analysis,
                analysed: true,
                fell_back: r.fell_back,
                pseudo_obs: n_pseudo,
                exclusions: r.exclusions,
                error: None,
            },
            Err(e) => failed(hour, &background, e),
        };
        background = advance(&record.state)?;
        records.push(record);
    }
    Ok(CycleOutput { scheme, records, final_forecast: background })
}
