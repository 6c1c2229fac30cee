//! `lightda`: batch front end for the lightning assimilation toolkit.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array3, Axis};

use lightda::adjoint::{self, AdjointReport};
use lightda::covariance::{factor_vertical_sqrt, nmc_vertical_covariance, CvtSpec};
use lightda::experiment::Experiment;
use lightda::io;
use lightda::minimizer::trace_table;
use lightda::obs_operator::{alpha_linearity_test_lightning, log_alphas};
use lightda::thermo::compute_cape;
use lightda::var1d::{batch_retrieve, summary_table, QcStatus};
use lightda::var_nd::{hourly_analysis, window_analysis, AnalysisResult};
use lightda::verify::{regrid_average, rmse};
use lightda::{AtmosColumn, Error, ExperimentConfig, ForecastPairSet, GridState, Scheme};

use manifest::{Check, Manifest};

const OUT_ENV: &str = "LIGHTDA_OUT";

#[derive(Parser)]
#[command(name = "lightda", version, about = "Variational lightning data assimilation on a synthetic twin experiment")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $LIGHTDA_OUT/<command> or ./lightda-out/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for batch retrievals.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AdjointTarget {
    All,
    Lightning,
    Filter,
    Cvt,
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Surface-parcel CAPE of a column file.
    Cape {
        /// Column CSV; a seeded unstable sounding when omitted.
        #[arg(long)]
        column: Option<PathBuf>,
    },
    /// Flash rate from a column file or a CAPE value.
    Flashrate {
        #[arg(long, conflicts_with = "cape")]
        column: Option<PathBuf>,
        /// J/kg.
        #[arg(long)]
        cape: Option<f64>,
    },
    /// Linearity test table of the lightning operator.
    AlphaTest {
        #[arg(long)]
        column: Option<PathBuf>,
        /// Surface amplitude of the low-level warming direction, K.
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        /// e-folding height of the direction, m.
        #[arg(long, default_value_t = 2000.0)]
        depth: f64,
        #[arg(long, default_value_t = -6)]
        log_alpha_min: i32,
        #[arg(long, default_value_t = 0)]
        log_alpha_max: i32,
        #[arg(long, default_value_t = 4)]
        per_decade: usize,
    },
    /// Dot-product tests of the tangent-linear/adjoint pairs.
    AdjointCheck {
        #[arg(long, value_enum, default_value_t = AdjointTarget::All)]
        operator: AdjointTarget,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// NMC covariance, EOFs and CVT from forecast-difference samples.
    NmcStats {
        /// Headerless CSV, one difference profile per row; the scenario's
        /// samples when omitted.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// 1D-VAR retrieval batch.
    #[command(name = "retrieve-1dvar")]
    Retrieve1dvar {
        /// Observation CSV; the scenario's observations at `--hour` when omitted.
        #[arg(long)]
        obs: Option<PathBuf>,
        /// Grid container; the scenario background when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Covariance container; the scenario NMC estimate when omitted.
        #[arg(long)]
        covariance: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        hour: usize,
    },
    /// One analysis of the chosen scheme at the scenario's start time.
    Assimilate {
        #[arg(long)]
        scheme: Option<Scheme>,
    },
    /// Hourly cycling of a scheme, scored against the truth.
    Cycle {
        #[arg(long)]
        scheme: Option<Scheme>,
    },
    /// RMSE of a grid or field container against a truth container.
    Verify {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Average over factor x factor blocks of every level first.
        #[arg(long)]
        regrid: Option<usize>,
    },
    /// Writes the synthetic truth, background, observations and NMC samples.
    GenOsse,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Cape { .. } => "cape",
            Command::Flashrate { .. } => "flashrate",
            Command::AlphaTest { .. } => "alpha-test",
            Command::AdjointCheck { .. } => "adjoint-check",
            Command::NmcStats { .. } => "nmc-stats",
            Command::Retrieve1dvar { .. } => "retrieve-1dvar",
            Command::Assimilate { .. } => "assimilate",
            Command::Cycle { .. } => "cycle",
            Command::Verify { .. } => "verify",
            Command::GenOsse => "gen-osse",
        }
    }
}

enum Failure {
    Error(Error),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type Outcome = Result<(), Failure>;

struct Run {
    config: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), Error> {
        let p = self.path(name);
        io::save_text(text, &p)
    }

    fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    fn check(&mut self, name: &str, value: f64, limit: f64, passed: bool) {
        println!("check {name}: {value:.6e} (limit {limit:e}) {}", if passed { "ok" } else { "FAILED" });
        self.manifest.checks.push(Check { name: name.to_string(), value, limit, passed });
    }

    fn experiment(&self) -> Result<Experiment, Error> {
        Experiment::prepare(&self.config)
    }
}

fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("lightda-out"));
    root.join(command)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn seeded_column(run: &Run) -> Result<AtmosColumn, Error> {
    adjoint::seeded_unstable_column(run.config.seed, &run.config.operator.params())
}

fn column_arg(run: &mut Run, column: &Option<PathBuf>) -> Result<AtmosColumn, Error> {
    match column {
        Some(p) => {
            run.input(p);
            io::load_column(p)
        }
        None => seeded_column(run),
    }
}

fn cape(run: &mut Run, column: &Option<PathBuf>) -> Outcome {
    let col = column_arg(run, column)?;
    let d = compute_cape(&col)?;
    let idx = |v: Option<usize>| v.map_or("none".to_string(), |k| k.to_string());
    println!("cape_jkg {:.6}", d.cape);
    println!("lcl_index {} lfc_index {} el_index {}", idx(d.lcl_index), idx(d.lfc_index), idx(d.el_index));
    let mut rows = String::from("level,pressure_pa,parcel_temperature_k,buoyancy_k,positive\n");
    for k in 0..col.n_levels() {
        rows.push_str(&format!(
            "{k},{},{:.6},{:.6},{}\n",
            col.pressure()[k],
            d.parcel_temperature[k],
            d.buoyancy[k],
            u8::from(d.positive_mask[k])
        ));
    }
    run.text("parcel.csv", &rows)?;
    run.manifest.results.insert("cape".into(), d.cape.into());
    Ok(())
}

fn flashrate(run: &mut Run, column: &Option<PathBuf>, cape: Option<f64>) -> Outcome {
    let params = run.config.operator.params();
    let cape = match cape {
        Some(c) => c,
        None => compute_cape(&column_arg(run, column)?)?.cape,
    };
    let h = params.flash_rate_from_cape(cape)?;
    println!("cape_jkg {cape:.6}");
    println!("flash_rate {h:.9}");
    run.manifest.results.insert("cape".into(), cape.into());
    run.manifest.results.insert("flash_rate".into(), h.into());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn alpha_test(run: &mut Run, column: &Option<PathBuf>, amplitude: f64, depth: f64, lo: i32, hi: i32, per_decade: usize) -> Outcome {
    if lo >= hi || per_decade == 0 || !(depth > 0.0) {
        return Err(Error::InvalidParameter("need log_alpha_min < log_alpha_max, per_decade >= 1 and depth > 0".into()).into());
    }
    let col = column_arg(run, column)?;
    let direction: Vec<f64> = col.height().iter().map(|z| amplitude * (-(z - col.height()[0]) / depth).exp()).collect();
    let points = alpha_linearity_test_lightning(&col, &direction, &log_alphas(lo, hi, per_decade), &run.config.operator.params())?;
    let mut rows = String::from("alpha,F,log10_abs_1_minus_F\n");
    for p in &points {
        rows.push_str(&format!("{:e},{:.12},{:.6}\n", p.alpha, p.f, p.log10_abs_1_minus_f));
    }
    print!("{rows}");
    run.text("alpha_test.csv", &rows)?;
    let min = points.iter().map(|p| p.log10_abs_1_minus_f).fold(f64::INFINITY, f64::min);
    run.manifest.results.insert("min_log10_abs_1_minus_F".into(), min.into());
    Ok(())
}

fn adjoint_check(run: &mut Run, target: AdjointTarget, cases: usize, tolerance: f64) -> Outcome {
    let seed = run.config.seed;
    let reports: Vec<AdjointReport> = match target {
        AdjointTarget::All => adjoint::all(cases, seed)?,
        AdjointTarget::Lightning => vec![adjoint::lightning_operator(cases, seed)?],
        AdjointTarget::Filter => vec![adjoint::recursive_filter(cases, seed)?],
        AdjointTarget::Cvt => vec![adjoint::cvt(cases, seed)?],
        AdjointTarget::Toy => vec![adjoint::toy_model(cases, seed)?],
    };
    let mut rows = String::from("operator,cases,max_relative_error\n");
    for r in &reports {
        rows.push_str(&format!("{},{},{:e}\n", r.operator, r.cases, r.max_relative_error));
        run.check(r.operator, r.max_relative_error, tolerance, r.passes(tolerance));
    }
    run.text("adjoint.csv", &rows)?;
    Ok(())
}

fn nmc_stats(run: &mut Run, samples: &Option<PathBuf>) -> Outcome {
    let pairs = match samples {
        Some(p) => {
            run.input(p);
            ForecastPairSet::new(io::load_with(p, io::read_samples_csv)?)?
        }
        None => run.experiment()?.osse.nmc_samples,
    };
    let cov = nmc_vertical_covariance(&pairs)?;
    let sqrt = factor_vertical_sqrt(&cov, run.config.covariance.mode_fraction)?;
    let spec = CvtSpec::new(sqrt, run.config.covariance.horizontal_lengthscale, run.config.covariance.filter_passes);
    io::save_with(&cov, &run.path("covariance.bin"), |c, w| io::write_covariance(c, w))?;
    io::save_with(&spec, &run.path("cvt.bin"), |s, w| io::write_cvt(s, w))?;
    run.text("correlation.csv", &cov.correlation_table())?;
    let ev = cov.eigenvalues();
    let total: f64 = ev.iter().sum();
    let mut rows = String::from("mode,eigenvalue,cumulative_fraction\n");
    let mut acc = 0.0;
    for (m, &l) in ev.iter().enumerate() {
        acc += l;
        rows.push_str(&format!("{m},{l:e},{:.6}\n", if total > 0.0 { acc / total } else { 0.0 }));
    }
    run.text("eigenvalues.csv", &rows)?;
    let std_rows: String = std::iter::once("level,std_dev\n".to_string())
        .chain(cov.std_dev().iter().enumerate().map(|(l, s)| format!("{l},{s:.6}\n")))
        .collect();
    run.text("std_dev.csv", &std_rows)?;
    println!("samples {} levels {} rank {} modes {}", pairs.samples().len(), cov.n_levels(), cov.rank(), spec.n_modes());
    let corr = cov.correlation();
    let diag_err = (0..corr.nrows()).map(|i| if cov.std_dev()[i] > 0.0 { (corr[(i, i)] - 1.0).abs() } else { 0.0 }).fold(0.0, f64::max);
    let range_excess = corr.iter().map(|c| (c.abs() - 1.0).max(0.0)).fold(0.0, f64::max);
    run.check("correlation_unit_diagonal", diag_err, 1e-12, diag_err <= 1e-12);
    run.check("correlation_within_unit_interval", range_excess, 0.0, range_excess == 0.0);
    run.manifest.results.insert("rank".into(), cov.rank().into());
    run.manifest.results.insert("modes".into(), spec.n_modes().into());
    Ok(())
}

fn retrieve(run: &mut Run, obs: &Option<PathBuf>, grid: &Option<PathBuf>, covariance: &Option<PathBuf>, hour: usize) -> Outcome {
    let needs_experiment = obs.is_none() || grid.is_none() || covariance.is_none();
    let exp = if needs_experiment { Some(run.experiment()?) } else { None };
    let observations = match obs {
        Some(p) => {
            run.input(p);
            io::load_observations(p, run.config.operator.sigma0)?
        }
        None => {
            let e = exp.as_ref().expect("experiment");
            e.osse.observations.get(hour).cloned().ok_or_else(|| Error::InvalidParameter(format!("no observations for hour {hour}")))?
        }
    };
    let state = match grid {
        Some(p) => {
            run.input(p);
            io::load_with(p, io::read_grid)?
        }
        None => exp.as_ref().expect("experiment").osse.background.clone(),
    };
    let bcov = match covariance {
        Some(p) => {
            run.input(p);
            io::load_with(p, io::read_covariance)?
        }
        None => exp.as_ref().expect("experiment").bcov.clone(),
    };
    let params = run.config.operator.params();
    let batch = batch_retrieve(&state, &observations, &bcov, &params, &run.config.retrieval_config());
    run.text("summary.csv", &summary_table(&batch.results))?;
    std::fs::create_dir_all(run.out.join("columns"))?;
    std::fs::create_dir_all(run.out.join("traces"))?;
    for r in &batch.results {
        let stem = format!("{}_{}_{}", r.obs.i, r.obs.j, r.obs.time_min);
        if let Some(m) = &r.minimize_report {
            run.text(&format!("traces/trace_{stem}.csv"), &trace_table(m))?;
        }
        if r.qc_status == QcStatus::Accepted {
            let col = state.column(r.obs.i, r.obs.j)?.with_temperature(r.analysis_temperature())?;
            let p = run.path(&format!("columns/column_{stem}.csv"));
            io::save_column(&col, &p)?;
        }
    }
    let mut skipped = String::from("i,j,time_min,flash_rate,reason\n");
    for s in &batch.skipped {
        skipped.push_str(&format!("{},{},{},{},{}\n", s.obs.i, s.obs.j, s.obs.time_min, s.obs.flash_rate, s.reason));
    }
    run.text("skipped.csv", &skipped)?;
    let s = &batch.summary;
    println!(
        "presented {} accepted {} low_cape {} small_improvement {} nonconvergence {} nonpositive {} failed {}",
        s.presented, s.accepted, s.rejected_low_cape, s.rejected_small_improvement, s.rejected_nonconvergence, s.skipped_nonpositive_innovation, s.failed
    );
    if let (Some(b), Some(a)) = (s.max_innovation_before, s.max_innovation_after) {
        println!("max_innovation {b:.4} -> {a:.4}");
    }
    run.manifest.results.insert("summary".into(), serde_json::to_value(s).expect("summary serializes"));
    Ok(())
}

fn write_analysis(run: &mut Run, exp: &Experiment, background: &GridState, r: &AnalysisResult, label: &str) -> Outcome {
    io::save_with(&r.analysis, &run.path("analysis.bin"), |g, w| io::write_grid(g, w))?;
    io::save_with(&r.increment, &run.path("increment.bin"), |f: &Array3<f64>, w| io::write_field(f, w))?;
    let mut costs = String::from("iter,cost\n");
    for (k, c) in r.cost_history.iter().enumerate() {
        costs.push_str(&format!("{k},{c:e}\n"));
    }
    run.text("cost_history.csv", &costs)?;
    let mut stats = String::from("stage,count,max,mean\n");
    for (stage, s) in [("before", &r.innovation_before), ("after", &r.innovation_after)] {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
        stats.push_str(&format!("{stage},{},{},{}\n", s.count, f(s.max), f(s.mean)));
    }
    run.text("innovation_stats.csv", &stats)?;
    let truth = exp.truth_at(0)?;
    let rb = rmse(background.temperature.view(), truth.temperature.view())?;
    let ra = rmse(r.analysis.temperature.view(), truth.temperature.view())?;
    println!("{label}: rmse background {rb:.5} analysis {ra:.5} status {:?} fell_back {}", r.status, r.fell_back);
    run.manifest.results.insert("rmse_background".into(), rb.into());
    run.manifest.results.insert("rmse_analysis".into(), ra.into());
    if let Some(e) = &r.exclusions {
        run.manifest.results.insert("exclusions".into(), serde_json::to_value(e).expect("report serializes"));
    }
    let (first, last) = (r.cost_history.first().copied(), r.cost_history.last().copied());
    if let (Some(j0), Some(j1)) = (first, last) {
        run.check("cost_not_increased", j1 - j0, 0.0, j1 <= j0);
    }
    Ok(())
}

fn assimilate(run: &mut Run, scheme: Option<Scheme>) -> Outcome {
    let scheme = scheme.unwrap_or(run.config.scheme.name);
    run.manifest.results.insert("scheme".into(), scheme.as_str().into());
    let exp = run.experiment()?;
    let ctx = exp.context();
    let background = exp.osse.background.clone();
    let (r, n_pseudo) = match scheme {
        Scheme::OneDFourDVar => {
            let hours = exp.window_hours().len().saturating_sub(1);
            window_analysis(&background, &exp.osse.observations, hours, run.config.scheme.cycle_hours, &ctx)?
        }
        _ => hourly_analysis(&background, &exp.osse.observations[0], scheme, &ctx)?,
    };
    run.manifest.results.insert("pseudo_observations".into(), n_pseudo.into());
    write_analysis(run, &exp, &background, &r, scheme.as_str())
}

fn cycle_cmd(run: &mut Run, scheme: Option<Scheme>) -> Outcome {
    let scheme = scheme.unwrap_or(run.config.scheme.name);
    run.manifest.results.insert("scheme".into(), scheme.as_str().into());
    let exp = run.experiment()?;
    let free = exp.score_free_run()?;
    let output = exp.run(scheme)?;
    let scores = exp.score_cycle(&output)?;
    run.text("scores.csv", &format!("time,rmse,label\n{}{}", free.to_rows(), scores.to_rows()))?;
    let mut rows = String::from("hour,analysed,fell_back,pseudo_obs,rmse,free_rmse,error\n");
    for (k, rec) in output.records.iter().enumerate() {
        rows.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{}\n",
            rec.hour,
            rec.analysed,
            rec.fell_back,
            rec.pseudo_obs,
            scores.rmse[k],
            free.rmse[k],
            rec.error.as_deref().unwrap_or("")
        ));
    }
    print!("{rows}");
    run.text("cycle.csv", &rows)?;
    io::save_with(&output.final_forecast, &run.path("final_forecast.bin"), |g, w| io::write_grid(g, w))?;
    for hour in exp.window_hours() {
        let k = output.records.iter().position(|r| r.hour == hour).expect("window hour recorded");
        let margin = scores.rmse[k] - free.rmse[k];
        run.check(&format!("window_rmse_below_free_h{hour}"), margin, 0.0, margin < 0.0);
    }
    Ok(())
}

enum Gridded {
    Grid(GridState),
    Field(Array3<f64>),
}

fn load_gridded(path: &Path) -> Result<Array3<f64>, Error> {
    let loaded = match io::load_with(path, io::read_grid) {
        Ok(g) => Gridded::Grid(g),
        Err(Error::Format(_)) => Gridded::Field(io::load_with(path, io::read_field)?),
        Err(e) => return Err(e),
    };
    Ok(match loaded {
        Gridded::Grid(g) => g.temperature,
        Gridded::Field(f) => f,
    })
}

fn verify(run: &mut Run, field: &Path, truth: &Path, regrid: Option<usize>) -> Outcome {
    run.input(field);
    run.input(truth);
    let (a, b) = (load_gridded(field)?, load_gridded(truth)?);
    let value = match regrid {
        None => rmse(a.view(), b.view())?,
        Some(k) => {
            if a.dim() != b.dim() {
                return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())).into());
            }
            let coarse = |f: &Array3<f64>| -> Result<Vec<f64>, Error> {
                let mut out = Vec::new();
                for level in f.axis_iter(Axis(0)) {
                    out.extend(regrid_average(level, k)?.iter().copied());
                }
                Ok(out)
            };
            let (ca, cb) = (coarse(&a)?, coarse(&b)?);
            rmse(ndarray::ArrayView1::from(&ca), ndarray::ArrayView1::from(&cb))?
        }
    };
    println!("rmse {value:.9}");
    run.text("rmse.csv", &format!("field,truth,regrid,rmse\n{},{},{},{value:.9}\n", field.display(), truth.display(), regrid.unwrap_or(1)))?;
    run.manifest.results.insert("rmse".into(), value.into());
    Ok(())
}

fn gen_osse(run: &mut Run) -> Outcome {
    let exp = run.experiment()?;
    let config_text = run.config.to_toml_string();
    run.text("config.toml", &config_text)?;
    for (h, t) in exp.osse.truth.iter().enumerate() {
        io::save_with(t, &run.path(&format!("truth_h{h}.bin")), |g, w| io::write_grid(g, w))?;
    }
    io::save_with(&exp.osse.background, &run.path("background.bin"), |g, w| io::write_grid(g, w))?;
    for (h, obs) in exp.osse.observations.iter().enumerate() {
        let p = run.path(&format!("obs_h{h}.csv"));
        io::save_observations(obs, &p)?;
    }
    let p = run.path("nmc_samples.csv");
    io::save_with(exp.osse.nmc_samples.samples(), &p, |s, w| io::write_samples_csv(s, w))?;

    let truth0 = &exp.osse.truth[0];
    let params = run.config.operator.params();
    let mut unstable = 0usize;
    for j in 0..truth0.ny() {
        for i in 0..truth0.nx() {
            if compute_cape(&truth0.column(i, j)?)?.cape > params.cape_min {
                unstable += 1;
            }
        }
    }
    let fraction = unstable as f64 / (truth0.nx() * truth0.ny()) as f64;
    let target = run.config.osse.scenario.unstable_fraction;
    println!("unstable_fraction {fraction:.4} target {target:.4}");
    let n_obs: usize = exp.osse.observations.iter().map(Vec::len).sum();
    println!("hours {} observations {n_obs}", exp.osse.truth.len());
    run.check("unstable_fraction_error", (fraction - target).abs(), 0.05, (fraction - target).abs() <= 0.05);
    run.manifest.results.insert("unstable_fraction".into(), fraction.into());
    Ok(())
}

fn dispatch(cli: &Cli, run: &mut Run) -> Outcome {
    match &cli.command {
        Command::Cape { column } => cape(run, column),
        Command::Flashrate { column, cape } => flashrate(run, column, *cape),
        Command::AlphaTest { column, amplitude, depth, log_alpha_min, log_alpha_max, per_decade } => {
            alpha_test(run, column, *amplitude, *depth, *log_alpha_min, *log_alpha_max, *per_decade)
        }
        Command::AdjointCheck { operator, cases, tolerance } => adjoint_check(run, *operator, *cases, *tolerance),
        Command::NmcStats { samples } => nmc_stats(run, samples),
        Command::Retrieve1dvar { obs, grid, covariance, hour } => retrieve(run, obs, grid, covariance, *hour),
        Command::Assimilate { scheme } => assimilate(run, *scheme),
        Command::Cycle { scheme } => cycle_cmd(run, *scheme),
        Command::Verify { field, truth, regrid } => verify(run, field, truth, *regrid),
        Command::GenOsse => gen_osse(run),
    }?;
    if run.manifest.checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn report(e: &Error) {
    eprintln!("error[{}]: {e}", e.category());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| default_out(command));

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[invalid-parameter]: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            report(&e);
            return ExitCode::from(2);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&out) {
        report(&Error::Io(e));
        return ExitCode::from(2);
    }
    let manifest = Manifest::new(command, &config, cli.config.as_deref());
    let mut run = Run { config, out, manifest };

    let (code, error) = match dispatch(&cli, &mut run) {
        Ok(()) => (0u8, None),
        Err(Failure::Checks) => {
            eprintln!("error[check-failed]: {} internal check(s) failed", run.manifest.checks.iter().filter(|c| !c.passed).count());
            (1, Some("check-failed".to_string()))
        }
        Err(Failure::Error(e)) => {
            report(&e);
            (2, Some(format!("{}: {e}", e.category())))
        }
    };
    run.manifest.exit_status = code;
    run.manifest.error = error;
    if let Err(e) = run.manifest.write(&run.out.join("manifest.json")) {
        report(&e);
        return ExitCode::from(2);
    }
    ExitCode::from(code)
}
