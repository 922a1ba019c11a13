//! Simulation populations, Poisson sampling for both frames, and the Monte
//! Carlo driver.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DualFrameDataset, Pattern, UnitRecord};
use crate::dml::{DmlConfig, Estimation, Estimator, ModelSpec};
use crate::error::{Error, Result};
use crate::inference::{mc_summary, Draw, EstimateReport, McSummary};
use crate::sampling_model::expit;
use crate::scores::MeanTarget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    O1,
    O2,
    O3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NpMechanism {
    NP1,
    NP2,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl Scenario {
    pub fn outcome(self) -> Outcome {
        match self {
            Scenario::S1 | Scenario::S4 => Outcome::O1,
            Scenario::S2 => Outcome::O2,
            Scenario::S3 => Outcome::O3,
        }
    }

    pub fn np_mechanism(self) -> NpMechanism {
        match self {
            Scenario::S3 => NpMechanism::NP2,
            _ => NpMechanism::NP1,
        }
    }

    pub fn relabel(self) -> bool {
        self == Scenario::S4
    }

    /// Working model used by the estimators in this scenario.
    pub fn model_spec(self) -> ModelSpec {
        let s = |v: &[&str]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        match self {
            Scenario::S3 => ModelSpec {
                features: s(&["1", "x", "z", "y"]),
                g: s(&["1", "x", "x^2", "z"]),
                binary: s(&["z"]),
                ..ModelSpec::default()
            },
            _ => ModelSpec::default(),
        }
    }

    /// Data-generating sampling coefficients, when the working model is
    /// correctly specified.
    pub fn true_phi(self) -> Option<Vec<f64>> {
        match self.np_mechanism() {
            NpMechanism::NP1 => Some(vec![-2.15, -0.5, -0.75]),
            NpMechanism::NP2 => None,
        }
    }
}

/// Population mean of `Y`, the same under every outcome model.
pub const THETA_TRUE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_pop: usize,
    pub outcome: Option<Outcome>,
    pub np_mech: Option<NpMechanism>,
    pub relabel: Option<bool>,
    pub seed: u64,
    pub replications: usize,
    /// Disables the outcome noise; for tests.
    #[serde(skip)]
    pub noise_off: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::S1,
            n_pop: 10_000,
            outcome: None,
            np_mech: None,
            relabel: None,
            seed: 1,
            replications: 200,
            noise_off: false,
        }
    }
}

impl ScenarioConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        ScenarioConfig { scenario, ..ScenarioConfig::default() }
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome.unwrap_or(self.scenario.outcome())
    }

    pub fn np_mech(&self) -> NpMechanism {
        self.np_mech.unwrap_or(self.scenario.np_mechanism())
    }

    pub fn relabel(&self) -> bool {
        self.relabel.unwrap_or(self.scenario.relabel())
    }

    /// Covariates recorded in the dataset.
    pub fn covariate_names(&self) -> Vec<String> {
        match self.outcome() {
            Outcome::O3 => vec!["x".into(), "z".into()],
            _ => vec!["x".into()],
        }
    }

    /// Independent RNG stream for one replication.
    pub fn rng(&self, replication: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replication);
        rng
    }
}

/// Fully observed finite population.
#[derive(Debug, Clone)]
pub struct Population {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn outcome_value(outcome: Outcome, x: f64, z: f64, e: f64) -> f64 {
    match outcome {
        Outcome::O1 => -(-2.0f64).exp() + (2.0 * x).cos() + 0.5 * x + e,
        Outcome::O2 => 0.8 * x + e,
        Outcome::O3 => 0.2 + 0.8 * x - 0.4 * z + e,
    }
}

pub fn pi_np_true(mech: NpMechanism, x: f64, y: f64) -> f64 {
    match mech {
        NpMechanism::NP1 => expit(-2.15 - 0.5 * x - 0.75 * y),
        NpMechanism::NP2 => expit(-1.5 - 0.3 * (2.0 * y).cos() - 0.1 * (y - 1.0).powi(2)),
    }
}

pub fn pi_p_true(x: f64) -> f64 {
    expit(-3.0 - 0.25 * (x - 2.0).powi(2))
}

pub fn gen_population(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Population {
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let outcome = cfg.outcome();
    let n = cfg.n_pop;
    let mut pop = Population { x: Vec::with_capacity(n), z: Vec::with_capacity(n), y: Vec::with_capacity(n) };
    for _ in 0..n {
        let x: f64 = std.sample(rng);
        let z = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let e = if cfg.noise_off { 0.0 } else { noise.sample(rng) };
        pop.x.push(x);
        pop.z.push(z);
        pop.y.push(outcome_value(outcome, x, z, e));
    }
    pop
}

/// Independent Poisson sampling into both frames, with the fields each
/// pattern does not observe masked out.
pub fn gen_samples(pop: &Population, cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<DualFrameDataset> {
    let mech = cfg.np_mech();
    let with_z = cfg.covariate_names().len() == 2;
    let mut recs = Vec::with_capacity(pop.len());
    for i in 0..pop.len() {
        let (x, z, y) = (pop.x[i], pop.z[i], pop.y[i]);
        let p_np = pi_np_true(mech, x, y);
        let p_p = pi_p_true(x);
        let dnp = rng.random::<f64>() < p_np;
        let dp = rng.random::<f64>() < p_p;
        let pattern = Pattern::new(dnp, dp);
        recs.push(UnitRecord {
            id: i as u64 + 1,
            pattern,
            x: if with_z { vec![x, z] } else { vec![x] },
            y: pattern.in_union().then_some(y),
            pi_p: dp.then_some(p_p),
        });
    }
    let ds = DualFrameDataset::new(recs, cfg.covariate_names())?;
    Ok(if cfg.relabel() { ds.relabel_unlinked() } else { ds })
}

/// Dataset for one replication.
pub fn gen_replication(cfg: &ScenarioConfig, replication: u64) -> Result<DualFrameDataset> {
    let mut rng = cfg.rng(replication);
    let pop = gen_population(cfg, &mut rng);
    gen_samples(&pop, cfg, &mut rng)
}

/// Results of one replication.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicationResult {
    pub replication: u64,
    pub n_np: usize,
    pub n_p: usize,
    pub reports: BTreeMap<String, std::result::Result<EstimateReport, String>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    pub summary: McSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub replications: Vec<ReplicationResult>,
    pub summaries: Vec<EstimatorSummary>,
}

/// Runs every estimator on one replication's dataset. Estimator failures
/// are recorded rather than propagated.
pub fn run_replication(cfg: &ScenarioConfig, replication: u64, estimators: &[Estimator], dml: &DmlConfig, spec: &ModelSpec) -> Result<ReplicationResult> {
    let ds = gen_replication(cfg, replication)?;
    let mut dml = dml.clone();
    dml.seed = dml.seed.wrapping_add(replication);
    let target = MeanTarget;
    let mut est = Estimation::new(&ds, dml, spec, &target)?;
    let mut reports = BTreeMap::new();
    for &e in estimators {
        let r = est.run(e).map_err(|err| err.to_string());
        if let Err(msg) = &r {
            log::warn!("replication {replication}, {}: {msg}", e.name());
        }
        reports.insert(e.name().to_string(), r);
    }
    Ok(ReplicationResult { replication, n_np: ds.n_np(), n_p: ds.n_p(), reports })
}

/// Parameter names and truths reported for an estimator.
fn parameters(scenario: Scenario, report: &EstimateReport) -> Vec<(String, f64)> {
    let mut out = vec![("theta".to_string(), THETA_TRUE)];
    if let (Some(phi), Some(hat)) = (scenario.true_phi(), &report.phi_hat) {
        if hat.len() == phi.len() {
            out.extend(phi.into_iter().enumerate().map(|(j, v)| (format!("phi{}", j + 1), v)));
        }
    }
    out
}

/// One estimator and parameter in one replication; the per-replication CSV
/// holds one of these per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub scenario: Scenario,
    pub replication: u64,
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_norm: Option<f64>,
    pub phi_fallback: bool,
    pub floored: usize,
    pub n_np: usize,
    pub n_p: usize,
    pub error: Option<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Flattens replication results. A failed estimator contributes a single
/// `theta` row carrying the error message.
pub fn replication_rows(scenario: Scenario, reps: &[ReplicationResult]) -> Vec<ReplicationRow> {
    let mut rows = Vec::new();
    for r in reps {
        for (name, res) in &r.reports {
            let base = ReplicationRow {
                scenario,
                replication: r.replication,
                estimator: name.clone(),
                parameter: "theta".into(),
                truth: THETA_TRUE,
                estimate: None,
                se: None,
                ci_lo: None,
                ci_hi: None,
                converged: false,
                iterations: 0,
                final_norm: None,
                phi_fallback: false,
                floored: 0,
                n_np: r.n_np,
                n_p: r.n_p,
                error: None,
            };
            match res {
                Err(msg) => rows.push(ReplicationRow { error: Some(msg.clone()), ..base }),
                Ok(rep) => {
                    let (est, se) = (rep.params(), rep.se());
                    let d = &rep.diagnostics;
                    for (j, (param, truth)) in parameters(scenario, rep).into_iter().enumerate() {
                        rows.push(ReplicationRow {
                            parameter: param,
                            truth,
                            estimate: finite(est[j]),
                            se: finite(se[j]),
                            ci_lo: finite(rep.ci[j].0),
                            ci_hi: finite(rep.ci[j].1),
                            converged: d.converged,
                            iterations: d.iterations,
                            final_norm: finite(d.final_norm),
                            phi_fallback: d.phi_fallback,
                            floored: d.floored,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    rows
}

/// Monte Carlo summary of every (estimator, parameter) pair, in order of
/// first appearance. Rows from failed or non-converged fits count as
/// failures; replications with no row for a parameter (an estimator that
/// errored before reporting `phi`) count as failures too.
pub fn summarize_rows(rows: &[ReplicationRow]) -> Vec<EstimatorSummary> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for r in rows {
        if r.error.is_none() && !keys.iter().any(|(e, p, _)| *e == r.estimator && *p == r.parameter) {
            keys.push((r.estimator.clone(), r.parameter.clone(), r.truth));
        }
    }
    for r in rows {
        if !keys.iter().any(|(e, _, _)| *e == r.estimator) {
            keys.push((r.estimator.clone(), r.parameter.clone(), r.truth));
        }
    }
    keys.into_iter()
        .map(|(est, param, truth)| {
            let mut reps: BTreeMap<u64, Option<Draw>> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.estimator == est) {
                let draw = if r.parameter == param && r.converged { r.estimate.map(|e| Draw { estimate: e, ci: r.ci_lo.zip(r.ci_hi) }) } else { None };
                let slot = reps.entry(r.replication).or_insert(None);
                if draw.is_some() {
                    *slot = draw;
                }
            }
            let draws: Vec<Option<Draw>> = reps.into_values().collect();
            EstimatorSummary { estimator: est, parameter: param, truth, summary: mc_summary(&draws, truth) }
        })
        .collect()
}

/// Monte Carlo summaries for a set of replication results.
pub fn summarize(scenario: Scenario, reps: &[ReplicationResult]) -> Vec<EstimatorSummary> {
    summarize_rows(&replication_rows(scenario, reps))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) }
}

pub fn write_replications_csv(path: &Path, rows: &[ReplicationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
}

pub fn read_replications_csv(path: &Path) -> Result<Vec<ReplicationRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    rdr.deserialize().collect::<std::result::Result<Vec<ReplicationRow>, _>>().map_err(csv_err(path))
}

#[derive(Debug, Serialize)]
struct SummaryLine<'a> {
    estimator: &'a str,
    parameter: &'a str,
    truth: f64,
    replications: usize,
    failed: usize,
    mean: f64,
    bias: f64,
    sd: f64,
    rmse: f64,
    bias_x1000: f64,
    sd_x1000: f64,
    rmse_x1000: f64,
    coverage: f64,
    covered_of: usize,
    sd_jackknife_se: f64,
}

pub fn write_summary_csv(path: &Path, summaries: &[EstimatorSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for s in summaries {
        let m = &s.summary;
        let (b, sd, r) = m.scaled();
        w.serialize(SummaryLine {
            estimator: &s.estimator,
            parameter: &s.parameter,
            truth: s.truth,
            replications: m.replications,
            failed: m.failed,
            mean: m.mean,
            bias: m.bias,
            sd: m.sd,
            rmse: m.rmse,
            bias_x1000: b,
            sd_x1000: sd,
            rmse_x1000: r,
            coverage: m.coverage,
            covered_of: m.covered_of,
            sd_jackknife_se: m.sd_jackknife_se,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Serialize)]
struct CoverageLine<'a> {
    scenario: Scenario,
    estimator: &'a str,
    parameter: &'a str,
    level: f64,
    coverage: f64,
    covered_of: usize,
    failed: usize,
}

/// Interval coverage per estimator and parameter.
pub fn write_coverage_csv(path: &Path, scenario: Scenario, level: f64, summaries: &[EstimatorSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for s in summaries {
        w.serialize(CoverageLine {
            scenario,
            estimator: &s.estimator,
            parameter: &s.parameter,
            level,
            coverage: s.summary.coverage,
            covered_of: s.summary.covered_of,
            failed: s.summary.failed,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// File names written by [`write_outputs`].
pub const REPLICATIONS_FILE: &str = "replications.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";

/// Writes the per-replication, summary and coverage CSVs into `dir`.
pub fn write_outputs(dir: &Path, run: &ScenarioRun, level: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
    write_replications_csv(&dir.join(REPLICATIONS_FILE), &replication_rows(run.scenario, &run.replications))?;
    write_summary_csv(&dir.join(SUMMARY_FILE), &run.summaries)?;
    write_coverage_csv(&dir.join(COVERAGE_FILE), run.scenario, level, &run.summaries)
}

/// Runs all replications in parallel and summarizes them. Results are
/// ordered by replication index regardless of scheduling.
pub fn run_scenario(cfg: &ScenarioConfig, estimators: &[Estimator], dml: &DmlConfig, spec: &ModelSpec) -> Result<ScenarioRun> {
    let reps = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| run_replication(cfg, r, estimators, dml, spec))
        .collect::<Result<Vec<_>>>()?;
    let summaries = summarize(cfg.scenario, &reps);
    Ok(ScenarioRun { scenario: cfg.scenario, replications: reps, summaries })
}
