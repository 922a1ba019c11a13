//! `dualframe`: estimation, simulation and diagnostics for integrated
//! probability and non-probability samples.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dualframe::dataset::{load_csv, ColumnSchema, DualFrameDataset};
use dualframe::dml::{diagnose_identifiability, estimate, DmlConfig, DmlVariant, Estimator, ModelSpec};
use dualframe::error::Error as CoreError;
use dualframe::inference::{normal_quantile, EstimateReport};
use dualframe::scores::MeanTarget;
use dualframe::simgen::{
    read_replications_csv, run_scenario, summarize_rows, write_coverage_csv, write_outputs, write_summary_csv,
    EstimatorSummary, ReplicationRow, Scenario, ScenarioConfig, COVERAGE_FILE, REPLICATIONS_FILE, SUMMARY_FILE,
};
use dualframe::solver::{phi_draws, DIAGNOSTIC_REL_TOL};

#[derive(Parser, Debug)]
#[command(name = "dualframe", version, about = "Dual-frame estimation with probability and non-probability samples")]
struct Cli {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a simulation scenario and write replication, summary and coverage CSVs.
    Simulate(SimulateArgs),
    /// Estimate from a CSV dataset.
    Estimate(EstimateArgs),
    /// Check the monotonicity condition of the identification equation.
    DiagnoseIdentifiability(DiagnoseArgs),
    /// Summarize a replication CSV written by `simulate`.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    col_id: Option<String>,
    #[arg(long)]
    col_delta_np: Option<String>,
    #[arg(long)]
    col_delta_p: Option<String>,
    #[arg(long)]
    col_pi_p: Option<String>,
    #[arg(long)]
    col_y: Option<String>,
    /// Comma-separated covariate columns (default: all remaining columns).
    #[arg(long, value_delimiter = ',')]
    col_x: Option<Vec<String>>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// JSON model specification.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sampling-model features, e.g. `1,x,y`.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Calibration functions for the classical estimators, e.g. `1,x,x^2`.
    #[arg(long, value_delimiter = ',')]
    g: Option<Vec<String>>,
    /// Binary covariates used as cells by the nuisance learners.
    #[arg(long, value_delimiter = ',')]
    binary: Option<Vec<String>>,
    /// Starting value for phi.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    phi_init: Option<Vec<f64>>,
}

#[derive(Args, Debug, Default)]
struct FitArgs {
    #[arg(long)]
    folds: Option<usize>,
    /// `dml1` or `dml2`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Interval level is `1 - alpha`.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Maximum nuisance refresh passes for `eff`.
    #[arg(long)]
    max_refresh: Option<usize>,
    /// Step-2 acceptance radius in step-1 standard errors.
    #[arg(long)]
    radius_mult: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Population size.
    #[arg(long)]
    n_pop: Option<usize>,
    /// Comma-separated estimators (default: all).
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    estimator: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a parameter table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Exit with status 2 when the solver did not converge.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of phi values to check.
    #[arg(long)]
    draws: Option<usize>,
    /// Half-width of the box around the starting phi.
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 2 when the check fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A `simulate` output directory or its replication CSV.
    #[arg(long)]
    input: PathBuf,
    /// Recompute intervals at level `1 - alpha` from the stored SEs.
    #[arg(long)]
    alpha: Option<f64>,
    /// Directory for the recomputed summary and coverage CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Keys accepted in `--config`; each mirrors a flag.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    estimator: Option<String>,
    estimators: Option<Vec<String>>,
    folds: Option<usize>,
    variant: Option<String>,
    seed: Option<u64>,
    alpha: Option<f64>,
    max_iter: Option<usize>,
    tol: Option<f64>,
    max_refresh: Option<usize>,
    radius_mult: Option<f64>,
    data: Option<PathBuf>,
    columns: Option<ColumnConfig>,
    model: Option<ModelSpec>,
    features: Option<Vec<String>>,
    g: Option<Vec<String>>,
    binary: Option<Vec<String>>,
    phi_init: Option<Vec<f64>>,
    scenario: Option<String>,
    reps: Option<usize>,
    n_pop: Option<usize>,
    out: Option<PathBuf>,
    draws: Option<usize>,
    spread: Option<f64>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ColumnConfig {
    id: Option<String>,
    delta_np: Option<String>,
    delta_p: Option<String>,
    pi_p: Option<String>,
    y: Option<String>,
    x: Option<Vec<String>>,
}

/// Estimation ran but did not produce a usable result.
#[derive(Debug)]
struct EstimationFailure(String);

impl std::fmt::Display for EstimationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for EstimationFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<EstimationFailure>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Fit(_) | CoreError::Numeric(_) | CoreError::Estimation(_) | CoreError::Evaluation { .. }) => 2,
        _ => 1,
    }
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn error_chain(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out.push_str(": ");
            out.push_str(&c);
        }
    }
    out
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

fn level_from_alpha(alpha: f64) -> anyhow::Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!(CoreError::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(1.0 - alpha)
}

fn parse_variant(s: &str) -> anyhow::Result<DmlVariant> {
    match s.to_ascii_lowercase().as_str() {
        "dml1" => Ok(DmlVariant::Dml1),
        "dml2" => Ok(DmlVariant::Dml2),
        other => bail!(CoreError::Config(format!("unknown variant `{other}` (expected dml1 or dml2)"))),
    }
}

fn dml_config(fit: &FitArgs, file: &FileConfig) -> anyhow::Result<DmlConfig> {
    let mut cfg = DmlConfig::default();
    if let Some(k) = fit.folds.or(file.folds) {
        cfg.k = k;
    }
    if let Some(v) = fit.variant.as_ref().or(file.variant.as_ref()) {
        cfg.variant = parse_variant(v)?;
    }
    if let Some(s) = fit.seed.or(file.seed) {
        cfg.seed = s;
    }
    if let Some(a) = fit.alpha.or(file.alpha) {
        cfg.level = level_from_alpha(a)?;
    }
    if let Some(m) = fit.max_iter.or(file.max_iter) {
        cfg.solver.max_iter = m;
    }
    if let Some(t) = fit.tol.or(file.tol) {
        cfg.solver.tol = t;
    }
    if let Some(r) = fit.max_refresh.or(file.max_refresh) {
        cfg.max_refresh = r;
    }
    if let Some(r) = fit.radius_mult.or(file.radius_mult) {
        cfg.radius_mult = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_spec(args: &ModelArgs, file: &FileConfig, default: ModelSpec) -> anyhow::Result<ModelSpec> {
    let mut spec = match (&args.model, &file.model) {
        (Some(path), _) => read_json(path)?,
        (None, Some(m)) => m.clone(),
        (None, None) => default,
    };
    if let Some(f) = args.features.clone().or_else(|| file.features.clone()) {
        spec.features = f;
    }
    if let Some(g) = args.g.clone().or_else(|| file.g.clone()) {
        spec.g = g;
    }
    if let Some(b) = args.binary.clone().or_else(|| file.binary.clone()) {
        spec.binary = b;
    }
    if let Some(p) = args.phi_init.clone().or_else(|| file.phi_init.clone()) {
        spec.phi_init = Some(p);
    }
    Ok(spec)
}

fn load_data(args: &DataArgs, file: &FileConfig) -> anyhow::Result<DualFrameDataset> {
    let path = args
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| anyhow!(CoreError::Config("--data is required".into())))?;
    let cols = file.columns.as_ref();
    let pick = |flag: &Option<String>, key: Option<&String>, default: String| flag.clone().or_else(|| key.cloned()).unwrap_or(default);
    let d = ColumnSchema::default();
    let schema = ColumnSchema {
        id: pick(&args.col_id, cols.and_then(|c| c.id.as_ref()), d.id),
        delta_np: pick(&args.col_delta_np, cols.and_then(|c| c.delta_np.as_ref()), d.delta_np),
        delta_p: pick(&args.col_delta_p, cols.and_then(|c| c.delta_p.as_ref()), d.delta_p),
        pi_p: pick(&args.col_pi_p, cols.and_then(|c| c.pi_p.as_ref()), d.pi_p),
        y: pick(&args.col_y, cols.and_then(|c| c.y.as_ref()), d.y),
        covariates: args.col_x.clone().or_else(|| cols.and_then(|c| c.x.clone())),
    };
    let ds = load_csv(&path, &schema)?;
    log::info!(
        "loaded {}: {} records, n_np = {}, n_p = {}",
        path.display(),
        ds.n_total(),
        ds.n_np(),
        ds.n_p()
    );
    Ok(ds)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn report_table(report: &EstimateReport) -> String {
    let q = report.theta_hat.len();
    let se = report.se();
    let mut out = String::from("parameter,estimate,se,ci_lo,ci_hi\n");
    for (j, v) in report.params().iter().enumerate() {
        let name = if j < q { format!("theta{}", j + 1) } else { format!("phi{}", j - q + 1) };
        let (lo, hi) = report.ci[j];
        out.push_str(&format!("{name},{v},{},{lo},{hi}\n", se[j]));
    }
    out
}

fn run_estimate(args: &EstimateArgs, file: &FileConfig) -> anyhow::Result<()> {
    let mut cfg = dml_config(&args.fit, file)?;
    if let Some(e) = args.estimator.as_ref().or(file.estimator.as_ref()) {
        cfg.estimator = Estimator::parse(e)?;
    }
    let spec = model_spec(&args.model, file, ModelSpec::default())?;
    let ds = load_data(&args.data, file)?;
    let report = estimate(&ds, &cfg, &spec, &MeanTarget)?;
    let se = report.theta_se();
    log::info!(
        "{}: theta = {:.6} (se {:.6}), converged = {}",
        report.estimator,
        report.theta_hat[0],
        se[0],
        report.diagnostics.converged
    );
    let json = serde_json::to_string_pretty(&report)?;
    match args.out.as_ref().or(file.out.as_ref()) {
        Some(path) => write_text(path, &json)?,
        None => println!("{json}"),
    }
    if let Some(path) = &args.csv {
        write_text(path, &report_table(&report))?;
    }
    if !report.diagnostics.converged {
        let msg = format!("solver did not converge: {}", report.diagnostics.notes.join("; "));
        if args.strict {
            return Err(EstimationFailure(msg).into());
        }
        log::warn!("{msg}");
    }
    Ok(())
}

fn parse_estimators(list: &[String]) -> anyhow::Result<Vec<Estimator>> {
    list.iter().map(|e| Estimator::parse(e).map_err(Into::into)).collect()
}

fn print_summaries(summaries: &[EstimatorSummary]) {
    println!("{:<10} {:<6} {:>10} {:>10} {:>10} {:>8} {:>7}", "estimator", "param", "bias*1e3", "sd*1e3", "rmse*1e3", "cover", "failed");
    for s in summaries {
        let (b, sd, r) = s.summary.scaled();
        println!(
            "{:<10} {:<6} {:>10.2} {:>10.2} {:>10.2} {:>8.3} {:>7}",
            s.estimator, s.parameter, b, sd, r, s.summary.coverage, s.summary.failed
        );
    }
}

fn run_simulate(args: &SimulateArgs, file: &FileConfig) -> anyhow::Result<()> {
    let scenario: Scenario = args.scenario.as_ref().or(file.scenario.as_ref()).map_or(Ok(Scenario::S1), |s| s.parse())?;
    let mut cfg = ScenarioConfig::for_scenario(scenario);
    if let Some(r) = args.reps.or(file.reps) {
        cfg.replications = r;
    }
    if let Some(n) = args.n_pop.or(file.n_pop) {
        cfg.n_pop = n;
    }
    if let Some(s) = args.fit.seed.or(file.seed) {
        cfg.seed = s;
    }
    if cfg.replications == 0 || cfg.n_pop < 10 {
        bail!(CoreError::Config("need at least one replication and a population of at least 10".into()));
    }
    let dml = dml_config(&args.fit, file)?;
    let estimators = match args.estimators.as_ref().or(file.estimators.as_ref()) {
        Some(list) => parse_estimators(list)?,
        None => Estimator::ALL.to_vec(),
    };
    let spec = model_spec(&args.model, file, scenario.model_spec())?;
    let out = args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
    log::info!("{scenario}: {} replications, N = {}, seed {}", cfg.replications, cfg.n_pop, cfg.seed);
    let run = run_scenario(&cfg, &estimators, &dml, &spec)?;
    write_outputs(&out, &run, dml.level)?;
    print_summaries(&run.summaries);
    log::info!("wrote {}, {} and {} to {}", REPLICATIONS_FILE, SUMMARY_FILE, COVERAGE_FILE, out.display());
    Ok(())
}

fn run_diagnose(args: &DiagnoseArgs, file: &FileConfig) -> anyhow::Result<()> {
    let spec = model_spec(&args.model, file, ModelSpec::default())?;
    let ds = load_data(&args.data, file)?;
    let dim = spec.features.len();
    let center = spec.phi_init.clone().unwrap_or_else(|| vec![0.0; dim]);
    let draws = args.draws.or(file.draws).unwrap_or(20);
    let spread = args.spread.or(file.spread).unwrap_or(0.5);
    if draws == 0 || !(spread >= 0.0) {
        bail!(CoreError::Config("--draws must be positive and --spread non-negative".into()));
    }
    let phis = phi_draws(&center, spread, draws, args.seed.or(file.seed).unwrap_or(0));
    let report = diagnose_identifiability(&ds, &spec, &phis)?;
    for p in &report.points {
        match (p.max_eigenvalue, &p.error) {
            (Some(e), _) => log::info!("phi {:?}: max eigenvalue {e:.3e}", p.phi),
            (None, Some(err)) => log::warn!("phi {:?}: {err}", p.phi),
            _ => {}
        }
    }
    if let Some(path) = args.out.as_ref().or(file.out.as_ref()) {
        write_text(path, &serde_json::to_string_pretty(&report)?)?;
    }
    let verdict = if report.pass { "PASS" } else { "FAIL" };
    let negative = report
        .points
        .iter()
        .filter(|p| p.max_eigenvalue.zip(p.jacobian_norm).is_some_and(|(e, n)| e < -DIAGNOSTIC_REL_TOL * n))
        .count();
    println!("{verdict}: symmetric Jacobian negative definite at {negative} of {draws} draws");
    if !report.pass && args.strict {
        return Err(EstimationFailure("identifiability diagnostic failed".into()).into());
    }
    Ok(())
}

/// Recomputes interval endpoints at `level` from the stored SEs.
fn relevel(rows: &mut [ReplicationRow], level: f64) {
    let z = normal_quantile(level);
    for r in rows {
        if let (Some(e), Some(s)) = (r.estimate, r.se) {
            r.ci_lo = Some(e - z * s);
            r.ci_hi = Some(e + z * s);
        }
    }
}

fn run_report(args: &ReportArgs) -> anyhow::Result<()> {
    let path = if args.input.is_dir() { args.input.join(REPLICATIONS_FILE) } else { args.input.clone() };
    let mut rows = read_replications_csv(&path)?;
    if rows.is_empty() {
        bail!(CoreError::Config(format!("{} has no rows", path.display())));
    }
    let level = match args.alpha {
        Some(a) => {
            let level = level_from_alpha(a)?;
            relevel(&mut rows, level);
            level
        }
        None => 0.95,
    };
    let mut scenarios: Vec<Scenario> = rows.iter().map(|r| r.scenario).collect();
    scenarios.sort();
    scenarios.dedup();
    for sc in scenarios {
        let sub: Vec<ReplicationRow> = rows.iter().filter(|r| r.scenario == sc).cloned().collect();
        let summaries = summarize_rows(&sub);
        println!("{sc}");
        print_summaries(&summaries);
        if let Some(dir) = &args.out {
            let dir = dir.join(sc.to_string());
            std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_summary_csv(&dir.join(SUMMARY_FILE), &summaries)?;
            write_coverage_csv(&dir.join(COVERAGE_FILE), sc, level, &summaries)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(CoreError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("cannot configure the thread pool")?;
    }
    let file: FileConfig = match &cli.config {
        Some(path) => read_json(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Simulate(a) => run_simulate(a, &file),
        Command::Estimate(a) => run_estimate(a, &file),
        Command::DiagnoseIdentifiability(a) => run_diagnose(a, &file),
        Command::Report(a) => run_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let default = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", error_chain(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
