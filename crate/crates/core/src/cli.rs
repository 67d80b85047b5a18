//! Batch command-line surface: `solve`, `certify`, `simulate`, `reproduce`
//! and `check`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certificates::{
    certify, lyapunov_decrease_check, CertificateError, CertificateReport, Certified,
    CertifyOptions,
};
use crate::check::{self, CheckOptions, Injection, SuiteResult};
use crate::config::{ConfigError, CriterionConfig, CriterionName, RunConfig};
use crate::engine::{
    run_fixed_horizon, run_until_stop_observed, EngineError, RunStatus, SweepContext, ViRun,
};
use crate::grid::{GridError, InterpMode, ValueTable};
use crate::problem::CubicIntegrator;
use crate::reproduce::{self, ExperimentSetup, Scale, ValueSequence};
use crate::simulate::{closed_loop, envelope_check, running_cost_estimate, EnvelopeReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_TERMINATED: i32 = 3;
pub const EXIT_CERTIFICATE_UNAVAILABLE: i32 = 4;
pub const EXIT_PROPERTY_FAILURE: i32 = 5;

pub const VALUES_FILE: &str = "values.vtbl";
pub const PREV_FILE: &str = "prev.vtbl";
pub const POLICY_FILE: &str = "policy.csv";
pub const PROGRESS_FILE: &str = "progress.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SIMULATION_FILE: &str = "simulation.json";
pub const CHECK_FILE: &str = "check.json";

const DEFAULT_OUT: &str = "stopvi-out";

#[derive(Debug, Parser)]
#[command(
    name = "stopvi",
    version,
    about = "Grid value iteration with state-dependent stopping criteria"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run value iteration until the stopping criterion holds.
    Solve(SolveArgs),
    /// Compute the certificate report for saved solve artifacts.
    Certify(CertifyArgs),
    /// Simulate the receding-horizon closed loop of saved artifacts.
    Simulate(SimulateArgs),
    /// Recompute the reference iteration or running-cost table.
    Reproduce(ReproduceArgs),
    /// Run the property suites.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Multilinear,
    Nearest,
}

impl From<InterpArg> for InterpMode {
    fn from(a: InterpArg) -> Self {
        match a {
            InterpArg::Multilinear => InterpMode::Multilinear,
            InterpArg::Nearest => InterpMode::NearestNeighbor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Full,
    Smoke,
}

impl From<ScaleArg> for Scale {
    fn from(a: ScaleArg) -> Self {
        match a {
            ScaleArg::Full => Scale::Full,
            ScaleArg::Smoke => Scale::Smoke,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableArg {
    Table1,
    Table2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RequireArg {
    EpsStarGlobal,
    Exponential,
    RunningCost,
    DBar,
    Semiglobal,
    Lyapunov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InjectArg {
    NegatedCost,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sweep worker threads; overrides the config.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub interp: Option<InterpArg>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Exit with a distinct status if this certificate is unavailable.
    #[arg(long, value_enum)]
    pub require: Vec<RequireArg>,
    /// Also run the Lyapunov decrease check along the closed loop.
    #[arg(long)]
    pub lyapunov: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub which: TableArg,
    #[arg(long, value_enum, default_value = "full")]
    pub scale: ScaleArg,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub interp: Option<InterpArg>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Deliberately corrupt the checked problem.
    #[arg(long, value_enum)]
    pub inject: Option<InjectArg>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error("invalid artifacts: {0}")]
    Artifacts(String),
    #[error("not terminated after d = {d} (artifacts written)")]
    NotTerminated { d: usize },
    #[error("requested certificates unavailable: {}", .0.join(", "))]
    CertificateUnavailable(Vec<String>),
    #[error("property suites failed: {}", .0.join(", "))]
    PropertyFailure(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NotTerminated { .. } => EXIT_NOT_TERMINATED,
            CliError::CertificateUnavailable(_) => EXIT_CERTIFICATE_UNAVAILABLE,
            CliError::PropertyFailure(_) => EXIT_PROPERTY_FAILURE,
            CliError::Engine(EngineError::InvalidCriterion(_) | EngineError::InvalidConfig(_)) => {
                EXIT_CONFIG
            }
            _ => EXIT_IO,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("stopvi: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Certify(a) => cmd_certify(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Reproduce(a) => cmd_reproduce(&a),
        Command::Check(a) => cmd_check(&a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            return Err(ConfigError::Invalid {
                field: "config",
                message: "--config is required".into(),
            }
            .into())
        }
    };
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub problem: String,
    pub criterion: String,
    pub epsilon: Vec<f64>,
    pub d: usize,
    pub status: RunStatus,
    pub region_bound: f64,
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

pub fn write_policy_csv<W: Write>(run: &ViRun<f64>, w: W) -> Result<(), GridError> {
    let mut out = csv::Writer::from_writer(w);
    let n = run.ctx.state_grid().dim();
    let m = run.ctx.input_grid().dim();
    let mut header = vec!["node".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.push("input_index".into());
    header.extend((0..m).map(|j| format!("u{j}")));
    out.write_record(&header)?;
    for (node, &index) in run.policy.iter().enumerate() {
        let mut row = vec![node.to_string()];
        row.extend(run.ctx.node_state(node).iter().map(|v| v.to_string()));
        row.push(index.to_string());
        row.extend(run.ctx.input(index as usize).iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_policy_csv(path: &Path) -> Result<Vec<u32>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(GridError::from)?;
    let col = rdr
        .headers()
        .map_err(GridError::from)?
        .iter()
        .position(|h| h == "input_index")
        .ok_or_else(|| CliError::Artifacts("policy.csv has no input_index column".into()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(GridError::from)?;
        let v = rec[col]
            .parse::<u32>()
            .map_err(|e| CliError::Artifacts(format!("policy.csv: {e}")))?;
        out.push(v);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_solve(args: &SolveArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(i) = args.interp {
        cfg.interp = i.into();
    }
    let dir = out_dir(&cfg);
    fs::create_dir_all(&dir)?;
    let p = cfg.problem.build()?;
    let (sg, ig) = cfg.grids()?;
    let crit = cfg.criterion.build()?;
    let mut progress = create(&dir.join(PROGRESS_FILE))?;
    let mut log_error = None;
    let run = run_until_stop_observed(p.as_ref(), sg, ig, crit, &cfg.run_options(), |r| {
        if let Err(e) = writeln!(progress, "{}", r.to_json_line()) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    progress.flush()?;
    run.v_curr.write_snapshot(create(&dir.join(VALUES_FILE))?)?;
    run.v_prev.write_snapshot(create(&dir.join(PREV_FILE))?)?;
    write_policy_csv(&run, create(&dir.join(POLICY_FILE))?)?;
    let manifest = Manifest {
        schema_version: crate::config::SCHEMA_VERSION,
        problem: run.problem_name.clone(),
        criterion: run.criterion.kind().label().to_string(),
        epsilon: run.criterion.epsilon().to_vec(),
        d: run.d,
        status: run.status,
        region_bound: run.region_bound,
        artifacts: [VALUES_FILE, PREV_FILE, POLICY_FILE, PROGRESS_FILE]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        config: cfg.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    println!(
        "d = {} ({:?}); artifacts in {}",
        run.d,
        run.status,
        dir.display()
    );
    match run.status {
        RunStatus::Stopped => Ok(()),
        RunStatus::NotTerminated => Err(CliError::NotTerminated { d: run.d }),
    }
}

/// Configuration fields that determine the solve artifacts.
fn same_problem(a: &RunConfig, b: &RunConfig) -> bool {
    a.problem == b.problem
        && a.state_grid == b.state_grid
        && a.input_grid == b.input_grid
        && a.criterion == b.criterion
        && a.region_bound == b.region_bound
        && a.interp == b.interp
        && a.clamp == b.clamp
}

/// Loads solve artifacts from the output directory. With `--config` the
/// configuration must describe the same run; otherwise the manifest's copy
/// is used.
pub fn load_artifacts(common: &Common) -> Result<(RunConfig, ViRun<f64>), CliError> {
    let dir = match (&common.out, &common.config) {
        (Some(d), _) => d.clone(),
        (None, Some(_)) => out_dir(&load_config(common)?),
        (None, None) => PathBuf::from(DEFAULT_OUT),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Artifacts(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Artifacts(format!("manifest: {e}")))?;
    let mut cfg = manifest.config.clone();
    if common.config.is_some() {
        let given = load_config(common)?;
        if !same_problem(&given, &cfg) {
            return Err(ConfigError::Invalid {
                field: "config",
                message: "does not match the configuration that produced the artifacts".into(),
            }
            .into());
        }
        cfg = given;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.out_dir = Some(dir.clone());
    cfg.validate()?;
    let read = |name: &str| -> Result<ValueTable<f64>, CliError> {
        let f =
            File::open(dir.join(name)).map_err(|e| CliError::Artifacts(format!("{name}: {e}")))?;
        Ok(ValueTable::read_snapshot(BufReader::new(f))?)
    };
    let (v_curr, v_prev) = (read(VALUES_FILE)?, read(PREV_FILE)?);
    let policy = read_policy_csv(&dir.join(POLICY_FILE))?;
    let p = cfg.problem.build()?;
    let (sg, ig) = cfg.grids()?;
    let ctx = SweepContext::new(p.as_ref(), sg, ig)?;
    let run = ViRun::from_tables(
        p.name(),
        ctx,
        cfg.criterion.build()?,
        manifest.region_bound,
        manifest.d,
        v_prev,
        v_curr,
        policy,
    )?;
    if run.status != manifest.status {
        return Err(CliError::Artifacts(
            "recomputed status disagrees with the manifest".into(),
        ));
    }
    Ok((cfg, run))
}

fn certified_name(r: RequireArg) -> &'static str {
    match r {
        RequireArg::EpsStarGlobal => "eps_star_global",
        RequireArg::Exponential => "exponential",
        RequireArg::RunningCost => "w_eps",
        RequireArg::DBar => "d_bar",
        RequireArg::Semiglobal => "eps_star_semiglobal",
        RequireArg::Lyapunov => "lyapunov",
    }
}

fn is_available(report: &CertificateReport, r: RequireArg) -> bool {
    fn ok<V>(c: &Certified<V>) -> bool {
        c.value().is_some()
    }
    match r {
        RequireArg::EpsStarGlobal => ok(&report.eps_star_global),
        RequireArg::Exponential => ok(&report.exponential),
        RequireArg::RunningCost => ok(&report.w_eps),
        RequireArg::DBar => ok(&report.d_bar),
        RequireArg::Semiglobal => ok(&report.eps_star_semiglobal),
        RequireArg::Lyapunov => report.lyapunov.is_some() && report.lyapunov_violations.is_empty(),
    }
}

pub fn cmd_certify(args: &CertifyArgs) -> Result<(), CliError> {
    let (cfg, run) = load_artifacts(&args.common)?;
    let p = cfg.problem.build()?;
    let lyapunov = if args.lyapunov {
        let x0 = cfg
            .simulation
            .x0
            .clone()
            .ok_or_else(|| ConfigError::Invalid {
                field: "simulation.x0",
                message: "required for the Lyapunov check".into(),
            })?;
        let (sg, ig) = cfg.grids()?;
        let long = run_fixed_horizon(
            p.as_ref(),
            sg,
            ig,
            run.criterion.clone(),
            run.d + cfg.certify.proxy_margin,
            &cfg.run_options(),
        )?;
        let t = closed_loop(
            &run,
            p.as_ref(),
            &x0,
            cfg.simulation.steps,
            cfg.simulation.selection,
        );
        Some(lyapunov_decrease_check(p.as_ref(), &run, &long, &t)?)
    } else {
        None
    };
    let options = CertifyOptions {
        horizon_target: cfg.certify.horizon_target,
        semiglobal_delta: cfg.certify.semiglobal_delta,
        ..CertifyOptions::default()
    };
    let report = certify(p.as_ref(), &run, &options, lyapunov)?;
    let dir = out_dir(&cfg);
    let mut w = create(&dir.join(CERTIFICATE_FILE))?;
    w.write_all(report.to_json().as_bytes())?;
    writeln!(w)?;
    w.flush()?;
    println!(
        "d = {}, eps* = {}, d_bar = {}; report in {}",
        report.d,
        report
            .eps_star_global
            .value()
            .map_or("unavailable".into(), |v| v.to_string()),
        report
            .d_bar
            .value()
            .map_or("unavailable".into(), |h| h.d_bar.to_string()),
        dir.join(CERTIFICATE_FILE).display()
    );
    let missing: Vec<String> = args
        .require
        .iter()
        .filter(|r| !is_available(&report, **r))
        .map(|r| certified_name(*r).to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::CertificateUnavailable(missing))
    }
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    x0: Vec<f64>,
    steps: usize,
    d: usize,
    running_cost: f64,
    final_sigma: f64,
    saturated: bool,
    envelope: Option<EnvelopeReport>,
    envelope_error: Option<String>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let (cfg, run) = load_artifacts(&args.common)?;
    let p = cfg.problem.build()?;
    let x0 = cfg
        .simulation
        .x0
        .clone()
        .ok_or_else(|| ConfigError::Invalid {
            field: "simulation.x0",
            message: "required for simulate".into(),
        })?;
    let t = closed_loop(
        &run,
        p.as_ref(),
        &x0,
        cfg.simulation.steps,
        cfg.simulation.selection,
    );
    let allowed = crate::certificates::exponential_claim_allowed(run.criterion.kind());
    let env = envelope_check(&t, p.as_ref(), run.criterion.eps_norm(), allowed, 0.0);
    let dir = out_dir(&cfg);
    t.write_csv(
        p.as_ref(),
        env.as_ref().ok().map(|e| e.envelope.as_slice()),
        create(&dir.join(TRAJECTORY_FILE))?,
    )?;
    let summary = SimulationSummary {
        x0,
        steps: t.horizon,
        d: run.d,
        running_cost: running_cost_estimate(&t),
        final_sigma: p.sigma(t.final_state()),
        saturated: t.any_saturated(),
        envelope_error: env.as_ref().err().map(|e| e.to_string()),
        envelope: env.ok(),
    };
    write_json(&dir.join(SIMULATION_FILE), &summary)?;
    println!(
        "running cost {:.3}, final sigma {:.6}; trajectory in {}",
        summary.running_cost,
        summary.final_sigma,
        dir.join(TRAJECTORY_FILE).display()
    );
    Ok(())
}

pub fn cmd_reproduce(args: &ReproduceArgs) -> Result<(), CliError> {
    let scale: Scale = args.scale.into();
    let mut setup = ExperimentSetup::new(scale);
    if let Some(w) = args.workers {
        setup.workers = w;
    }
    if let Some(i) = args.interp {
        setup.interp = i.into();
    }
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir)?;
    let p = CubicIntegrator::default();
    let cap = match args.which {
        TableArg::Table1 => scale.cap(),
        TableArg::Table2 => *reproduce::TABLE2_D.last().expect("columns"),
    };
    let seq = ValueSequence::compute(&p, &setup, cap, |d, ms| eprintln!("sweep d={d} {ms:.0} ms"))?;
    let flags = scale == Scale::Full;
    if seq.monotonicity_violations > 0 {
        return Err(CliError::PropertyFailure(vec![format!(
            "{} monotonicity violations",
            seq.monotonicity_violations
        )]));
    }
    match args.which {
        TableArg::Table1 => {
            let cells = reproduce::table1(&seq);
            let path = dir.join("table1.csv");
            reproduce::write_table1_csv(&cells, flags, create(&path)?)?;
            for c in &cells {
                println!(
                    "{:<10} eps={:<6} d={:<5} reference={}",
                    c.criterion,
                    c.epsilon,
                    c.computed.map_or("none".into(), |d| d.to_string()),
                    c.reference
                );
            }
            if flags {
                let exact = cells.iter().filter(|c| c.exact).count();
                let near = cells.iter().filter(|c| c.within_one).count();
                println!("exact {exact}/21, within one {near}/21");
            }
            let problems = reproduce::table1_invariants(&cells);
            println!("{}", path.display());
            if !problems.is_empty() {
                return Err(CliError::PropertyFailure(problems));
            }
        }
        TableArg::Table2 => {
            let cols = reproduce::table2(&p, &seq, setup.selection);
            let path = dir.join("table2.csv");
            reproduce::write_table2_csv(&cols, flags, create(&path)?)?;
            for c in &cols {
                println!(
                    "d={} v_run={:.1} (reference {}) sigma_final={:.4} (reference {})",
                    c.d, c.v_run, c.reference_v_run, c.sigma_final, c.reference_sigma
                );
            }
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// Default configuration for `check` without `--config`.
pub fn default_check_config() -> RunConfig {
    RunConfig::smoke(CriterionConfig::scalar(CriterionName::Relative, 0.01))
}

pub fn cmd_check(args: &CheckArgs) -> Result<(), CliError> {
    let cfg = match &args.common.config {
        Some(_) => load_config(&args.common)?,
        None => {
            let mut c = default_check_config();
            if let Some(w) = args.common.workers {
                c.workers = w;
            }
            c.out_dir = args.common.out.clone();
            c
        }
    };
    let p = cfg.problem.build()?;
    let options = CheckOptions {
        seed: cfg.seed,
        workers: cfg.workers,
        inject: args
            .inject
            .map(|InjectArg::NegatedCost| Injection::NegatedCost),
        ..CheckOptions::default()
    };
    let results = check::run_all(
        p.as_ref(),
        &cfg.state_grid.lower,
        &cfg.state_grid.upper,
        &options,
    );
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(CHECK_FILE), &results)?;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r: &&SuiteResult| !r.passed)
        .map(|r| r.name.clone())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::PropertyFailure(failed))
    }
}
