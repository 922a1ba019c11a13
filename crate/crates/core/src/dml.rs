//! Estimator orchestration: baselines, the sub-efficient estimator and the
//! cross-fitted efficient estimator in its DML1 and DML2 forms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_folds, DualFrameDataset, FoldPartition};
use crate::error::{Error, Result};
use crate::features::{CovariateMap, FeatureMap};
use crate::inference::{matrix_to_rows, sandwich, wald, Diagnostics, EstimateReport};
use crate::nuisance::{GtildeVariant, NuisanceConfig, NuisanceFit};
use crate::sampling_model::{LogisticSamplingModel, DEFAULT_EPS};
use crate::scores::{mean_over, Augmentation, MeanTarget, Nuisance, ScoreContext, Target};
use crate::solver::{
    monotonicity_diagnostic, numeric_jacobian, solve_phi_two_step, solve_proposed, solve_root, DiagnosticReport, RootResult,
    SolverConfig, PHI_MAX_STEP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    P,
    Np,
    PNp,
    EffUnion,
    #[serde(alias = "eff_s")]
    Subeff,
    Eff,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::P,
        Estimator::Np,
        Estimator::PNp,
        Estimator::EffUnion,
        Estimator::Subeff,
        Estimator::Eff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::P => "p",
            Estimator::Np => "np",
            Estimator::PNp => "p_np",
            Estimator::EffUnion => "eff_union",
            Estimator::Subeff => "subeff",
            Estimator::Eff => "eff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p" => Ok(Estimator::P),
            "np" => Ok(Estimator::Np),
            "p_np" | "pnp" => Ok(Estimator::PNp),
            "eff_union" => Ok(Estimator::EffUnion),
            "subeff" | "eff_s" => Ok(Estimator::Subeff),
            "eff" => Ok(Estimator::Eff),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }

    /// Whether the estimator fits the non-probability sampling model.
    pub fn has_phi(self) -> bool {
        matches!(self, Estimator::Np | Estimator::PNp | Estimator::EffUnion | Estimator::Eff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DmlVariant {
    Dml1,
    #[default]
    Dml2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmlConfig {
    pub k: usize,
    pub variant: DmlVariant,
    pub estimator: Estimator,
    pub seed: u64,
    /// Two-sided interval level.
    pub level: f64,
    pub solver: SolverConfig,
    /// Maximum nuisance refreshes in the alternating solve.
    pub max_refresh: usize,
    /// Acceptance radius of the augmented `phi` step, in preliminary SEs.
    pub radius_mult: f64,
}

impl Default for DmlConfig {
    fn default() -> Self {
        DmlConfig {
            k: 5,
            variant: DmlVariant::Dml2,
            estimator: Estimator::Eff,
            seed: 0,
            level: 0.95,
            solver: SolverConfig::default(),
            max_refresh: 5,
            radius_mult: 2.0,
        }
    }
}

impl DmlConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.k < 2 {
            return Err(Error::Config(format!("fold count must be at least 2, got {}", self.k)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("interval level must be in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

/// Working model: sampling-model features, calibration functions and
/// nuisance learner settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Tokens of the sampling-model feature map, e.g. `["1", "x", "y"]`.
    pub features: Vec<String>,
    /// Calibration functions for the `np` and `p_np` baselines.
    pub g: Vec<String>,
    /// Covariates treated as binary by the nuisance learners.
    pub binary: Vec<String>,
    pub eps: f64,
    pub phi_init: Option<Vec<f64>>,
    pub nuisance: NuisanceConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            features: vec!["1".into(), "x".into(), "y".into()],
            g: vec!["1".into(), "x".into(), "x^2".into()],
            binary: Vec::new(),
            eps: DEFAULT_EPS,
            phi_init: None,
            nuisance: NuisanceConfig::default(),
        }
    }
}

/// A model spec checked against a dataset's columns.
#[derive(Debug, Clone)]
pub struct ResolvedSpec {
    pub model: LogisticSamplingModel,
    pub g: CovariateMap,
    pub nuisance: NuisanceConfig,
    pub phi_init: Vec<f64>,
}

impl ModelSpec {
    pub fn resolve(&self, ds: &DualFrameDataset) -> Result<ResolvedSpec> {
        let names = ds.covariate_names();
        let features = FeatureMap::parse(&self.features, names)?;
        let phi_init = self.phi_init.clone().unwrap_or_else(|| vec![0.0; features.dim()]);
        if phi_init.len() != features.dim() {
            return Err(Error::Config(format!(
                "phi_init has {} entries but the sampling model has {}",
                phi_init.len(),
                features.dim()
            )));
        }
        let model = LogisticSamplingModel::new(phi_init.clone(), features, self.eps)?;
        let g = CovariateMap::parse(&self.g, names)?;
        let mut nuisance = self.nuisance.clone();
        for b in &self.binary {
            let idx = ds
                .covariate_index(b)
                .ok_or_else(|| Error::Config(format!("unknown binary covariate `{b}`")))?;
            if !nuisance.binary_columns.contains(&idx) {
                nuisance.binary_columns.push(idx);
            }
        }
        Ok(ResolvedSpec { model, g, nuisance, phi_init })
    }
}

/// Mean of observed outcomes; starting value for `theta`.
fn theta_start(ds: &DualFrameDataset, dim: usize) -> Vec<f64> {
    let ys: Vec<f64> = ds.records().iter().filter_map(|r| r.y).collect();
    vec![ys.iter().sum::<f64>() / ys.len().max(1) as f64; dim]
}

/// Stacked estimating system in `(theta, phi)`.
#[derive(Clone, Copy)]
enum System<'a> {
    IpwP,
    Np(&'a CovariateMap),
    PNp(&'a CovariateMap),
    Eff,
    Subeff,
}

impl System<'_> {
    fn unit(&self, ctx: &ScoreContext<'_>, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        let q = ctx.dim_theta();
        let (theta, phi) = x.split_at(q);
        match self {
            System::IpwP => ctx.ipw_p(i, theta),
            System::Subeff => ctx.subeff(i, theta),
            System::Np(g) => {
                let mut v = ctx.ipw_np(i, theta, phi)?;
                v.extend(ctx.chang_kott(i, phi, g)?);
                Ok(v)
            }
            System::PNp(g) => {
                let mut v = ctx.ipw_union(i, theta, phi)?;
                v.extend(ctx.union_calibration(i, phi, g)?);
                Ok(v)
            }
            System::Eff => ctx.eff_joint(i, theta, phi),
        }
    }

    fn mean(&self, ctx: &ScoreContext<'_>, subset: Option<&[usize]>, x: &[f64]) -> Result<Vec<f64>> {
        mean_over(ctx.n(), subset, x.len(), |i| self.unit(ctx, i, x))
    }

    fn scores(&self, ctx: &ScoreContext<'_>, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..ctx.n()).map(|i| self.unit(ctx, i, x)).collect()
    }
}

/// Sandwich covariance of a stacked root with a numeric Jacobian of the
/// mean equations.
fn stacked_covariance(sys: System<'_>, ctx: &ScoreContext<'_>, x: &[f64]) -> Result<(DMatrix<f64>, bool)> {
    let mut g = |v: &[f64]| sys.mean(ctx, None, v);
    let j = numeric_jacobian(&mut g, x)?;
    let scores = sys.scores(ctx, x)?;
    Ok(sandwich(&scores, &j, ctx.n()))
}

fn record_root(d: &mut Diagnostics, r: &RootResult) {
    d.iterations += r.iterations;
    d.final_norm = r.final_norm;
    d.converged = r.converged;
    d.pseudo_inverse |= r.pseudo_inverse;
    if let Some(m) = &r.message {
        if !r.converged {
            d.notes.push(m.clone());
        }
    }
}

/// Estimation on one dataset, sharing cross-fitted learners between
/// estimators.
pub struct Estimation<'a> {
    pub ds: &'a DualFrameDataset,
    pub cfg: DmlConfig,
    pub spec: ResolvedSpec,
    pub target: &'a dyn Target,
    cross: Option<NuisanceFit>,
    /// Cached outcome surrogate for the sub-efficient estimator.
    gtilde: Option<(Vec<f64>, Vec<String>)>,
}

impl<'a> Estimation<'a> {
    pub fn new(ds: &'a DualFrameDataset, cfg: DmlConfig, spec: &ModelSpec, target: &'a dyn Target) -> Result<Self> {
        cfg.validate()?;
        let spec = spec.resolve(ds)?;
        Ok(Estimation { ds, cfg, spec, target, cross: None, gtilde: None })
    }

    /// Uses `part` for cross-fitting instead of a seeded random split.
    pub fn with_partition(mut self, part: FoldPartition) -> Result<Self> {
        if part.k() != self.cfg.k || part.assignments().len() != self.ds.n_total() {
            return Err(Error::Config(format!(
                "partition has {} folds over {} records; expected {} over {}",
                part.k(),
                part.assignments().len(),
                self.cfg.k,
                self.ds.n_total()
            )));
        }
        self.cross = Some(NuisanceFit::cross_fitted(self.ds, part, &self.spec.nuisance)?);
        Ok(self)
    }

    /// Cross-fitted working probability for every record.
    pub fn pi_bar(&mut self) -> Result<Vec<f64>> {
        let n = self.ds.n_total();
        Ok(self.cross_fit()?.pi_bar(n))
    }

    fn cross_fit(&mut self) -> Result<&mut NuisanceFit> {
        if self.cross.is_none() {
            let part = split_folds(self.ds, self.cfg.k, self.cfg.seed)?;
            let fit = NuisanceFit::cross_fitted(self.ds, part, &self.spec.nuisance)?;
            debug_assert!(fit.verify());
            self.cross = Some(fit);
        }
        Ok(self.cross.as_mut().expect("just built"))
    }

    fn report(
        &self,
        est: Estimator,
        x: &[f64],
        vcov: &DMatrix<f64>,
        mut diagnostics: Diagnostics,
        pseudo: bool,
    ) -> EstimateReport {
        let q = self.target.dim();
        diagnostics.pseudo_inverse |= pseudo;
        if pseudo {
            diagnostics.notes.push("singular Jacobian in the sandwich; pseudo-inverse used".into());
        }
        let rows = matrix_to_rows(vcov);
        let se: Vec<f64> = (0..rows.len()).map(|j| rows[j][j].max(0.0).sqrt()).collect();
        EstimateReport {
            estimator: est.name().to_string(),
            theta_hat: x[..q].to_vec(),
            phi_hat: (x.len() > q).then(|| x[q..].to_vec()),
            ci: wald(x, &se, self.cfg.level),
            vcov: rows,
            level: self.cfg.level,
            n_total: self.ds.n_total(),
            n_np: self.ds.n_np(),
            n_p: self.ds.n_p(),
            diagnostics,
        }
    }

    pub fn run(&mut self, est: Estimator) -> Result<EstimateReport> {
        match est {
            Estimator::P => self.run_ipw_p(),
            Estimator::Np => self.run_np(),
            Estimator::PNp => self.run_p_np(),
            Estimator::Subeff => self.run_subeff(),
            Estimator::EffUnion => self.run_eff(false),
            Estimator::Eff => self.run_eff(true),
        }
    }

    fn context(&self, nuisance: Nuisance) -> ScoreContext<'_> {
        ScoreContext::new(self.ds, &self.spec.model, self.target, nuisance)
    }

    /// Solves a system from `x0` and wraps the result; a non-converged solve
    /// yields a report flagged as such.
    fn finish(&self, est: Estimator, sys: System<'_>, ctx: &ScoreContext<'_>, x0: &[f64], mut diag: Diagnostics) -> Result<EstimateReport> {
        let root = solve_root(|x: &[f64]| sys.mean(ctx, None, x), x0, &self.cfg.solver);
        record_root(&mut diag, &root);
        let (vcov, pseudo) = stacked_covariance(sys, ctx, &root.solution)?;
        Ok(self.report(est, &root.solution, &vcov, diag, pseudo))
    }

    fn run_ipw_p(&mut self) -> Result<EstimateReport> {
        let ctx = self.context(Nuisance::default());
        let x0 = theta_start(self.ds, self.target.dim());
        self.finish(Estimator::P, System::IpwP, &ctx, &x0, Diagnostics::default())
    }

    /// Calibration-based `phi` followed by the weighted `theta` equation.
    fn run_calibrated(&mut self, est: Estimator, nuisance: Nuisance) -> Result<EstimateReport> {
        let ctx = self.context(nuisance);
        let g = &self.spec.g;
        if g.dim() != ctx.dim_phi() {
            return Err(Error::Config(format!(
                "calibration function has {} terms but the sampling model has {}",
                g.dim(),
                ctx.dim_phi()
            )));
        }
        let calib = |phi: &[f64]| {
            mean_over(ctx.n(), None, ctx.dim_phi(), |i| match est {
                Estimator::Np => ctx.chang_kott(i, phi, g),
                _ => ctx.union_calibration(i, phi, g),
            })
        };
        let mut diag = Diagnostics::default();
        let phi_cfg = SolverConfig { max_step: self.cfg.solver.max_step.or(Some(PHI_MAX_STEP)), ..self.cfg.solver.clone() };
        let phi_root = solve_root(calib, &self.spec.phi_init, &phi_cfg);
        record_root(&mut diag, &phi_root);
        let mut x0 = theta_start(self.ds, self.target.dim());
        x0.extend(&phi_root.solution);
        let sys = if est == Estimator::Np { System::Np(g) } else { System::PNp(g) };
        if !phi_root.converged {
            let (vcov, pseudo) = stacked_covariance(sys, &ctx, &x0)?;
            return Ok(self.report(est, &x0, &vcov, diag, pseudo));
        }
        self.finish(est, sys, &ctx, &x0, diag)
    }

    fn run_np(&mut self) -> Result<EstimateReport> {
        self.run_calibrated(Estimator::Np, Nuisance::default())
    }

    /// The union baseline uses a working `pi_p` fitted on the full sample.
    fn run_p_np(&mut self) -> Result<EstimateReport> {
        let all: Vec<usize> = (0..self.ds.n_total()).collect();
        let model = self.spec.nuisance.fit_pi_bar(self.ds, &all)?;
        let pi_bar = self.ds.records().iter().map(|r| model.predict(r).unwrap_or(f64::NAN)).collect();
        self.run_calibrated(Estimator::PNp, Nuisance { pi_bar, ..Nuisance::default() })
    }

    /// Cross-fitted outcome surrogate `m(X)` and any fallback notes.
    pub fn gtilde(&mut self) -> Result<(Vec<f64>, Vec<String>)> {
        if let Some(g) = &self.gtilde {
            return Ok(g.clone());
        }
        let variant = self.spec.nuisance.gtilde;
        let cfg = self.spec.nuisance.clone();
        let ds = self.ds;
        let fit = self.cross_fit()?;
        let mut notes = Vec::new();
        let m = match fit.gtilde(ds, &cfg, variant) {
            Ok(m) => m,
            Err(Error::Fit(msg)) if variant == GtildeVariant::Linkage => {
                notes.push(format!("linkage working model unavailable ({msg}); used mar"));
                fit.gtilde(ds, &cfg, GtildeVariant::Mar)?
            }
            Err(e) => return Err(e),
        };
        self.gtilde = Some((m.clone(), notes.clone()));
        Ok((m, notes))
    }

    fn run_subeff(&mut self) -> Result<EstimateReport> {
        let (m, notes) = self.gtilde()?;
        let ctx = self.context(Nuisance { gtilde_outcome: Some(m), ..Nuisance::default() });
        let x0 = theta_start(self.ds, self.target.dim());
        let diag = Diagnostics { notes, ..Diagnostics::default() };
        match self.cfg.variant {
            DmlVariant::Dml2 => self.finish(Estimator::Subeff, System::Subeff, &ctx, &x0, diag),
            DmlVariant::Dml1 => self.dml1(Estimator::Subeff, System::Subeff, &ctx, &x0, diag),
        }
    }

    /// Per-fold roots of the system restricted to each fold, averaged.
    /// The covariance is the pooled sandwich at the averaged estimate.
    fn dml1(&self, est: Estimator, sys: System<'_>, ctx: &ScoreContext<'_>, x0: &[f64], mut diag: Diagnostics) -> Result<EstimateReport> {
        let part = self.cross.as_ref().and_then(|c| c.partition.as_ref()).expect("cross-fitted partition");
        let mut acc = vec![0.0; x0.len()];
        let mut all_converged = true;
        for k in 0..part.k() {
            let members = part.members(k);
            let r = solve_root(|x: &[f64]| sys.mean(ctx, Some(&members), x), x0, &self.cfg.solver);
            diag.iterations += r.iterations;
            diag.pseudo_inverse |= r.pseudo_inverse;
            if !r.converged {
                all_converged = false;
                diag.notes.push(format!("fold {k}: {}", r.message.clone().unwrap_or_default()));
            }
            for (a, v) in acc.iter_mut().zip(&r.solution) {
                *a += v / part.k() as f64;
            }
        }
        diag.converged = all_converged;
        diag.final_norm = sys.mean(ctx, None, &acc)?.iter().fold(0.0, |m, v| m.max(v.abs()));
        let (vcov, pseudo) = stacked_covariance(sys, ctx, &acc)?;
        Ok(self.report(est, &acc, &vcov, diag, pseudo))
    }

    /// Efficient estimator; with `augment = false` the augmentation
    /// functions are held at zero.
    fn run_eff(&mut self, augment: bool) -> Result<EstimateReport> {
        let est = if augment { Estimator::Eff } else { Estimator::EffUnion };
        let n = self.ds.n_total();
        let ds = self.ds;
        let target = self.target;
        let model = self.spec.model.clone();
        let phi_init = self.spec.phi_init.clone();
        let solver = self.cfg.solver.clone();
        let (max_refresh, radius) = (self.cfg.max_refresh, self.cfg.radius_mult);
        let fit = self.cross_fit()?;
        let floored_before = fit.floored;
        let pi_bar = fit.pi_bar(n);
        let mut diag = Diagnostics::default();
        let mut nuis = Nuisance { pi_bar, ..Nuisance::default() };

        let ctx0 = ScoreContext::new(ds, &model, target, nuis.clone());
        let prelim = solve_proposed(&ctx0, Augmentation::Zero, &phi_init, &solver);
        record_root(&mut diag, &prelim);
        if !prelim.converged {
            return Err(Error::Estimation(format!(
                "preliminary phi solve failed: {}",
                prelim.message.unwrap_or_default()
            )));
        }
        let mut phi = prelim.solution.clone();
        let mut theta = theta_start(ds, target.dim());
        let mut use_eta = augment;

        if augment {
            let dens = fit.denominators(ds, &model, &phi)?;
            let eta4 = fit.eta4(n, &dens)?;
            let two = solve_phi_two_step(&ctx0, Augmentation::NegValues(&eta4), &phi_init, &solver, radius)?;
            diag.iterations += two.result.iterations;
            diag.phi_fallback = two.fell_back;
            if two.fell_back {
                use_eta = false;
                diag.notes.push("augmented phi step rejected; preliminary root kept".into());
            }
            phi = two.result.solution;
        }

        let q = target.dim();
        for r in 0..=max_refresh {
            if augment {
                let dens = fit.denominators(ds, &model, &phi)?;
                nuis.eta4 = if use_eta { Some(fit.eta4(n, &dens)?) } else { None };
                nuis.h4 = Some(fit.h4(ds, target, &theta, &dens)?);
                diag.refreshes = r;
            }
            let ctx = ScoreContext::new(ds, &model, target, nuis.clone());
            let phi_fixed = phi.clone();
            let th = solve_root(
                |t: &[f64]| mean_over(n, None, q, |i| ctx.eff_theta(i, t, &phi_fixed)),
                &theta,
                &solver,
            );
            record_root(&mut diag, &th);
            let ph = match &nuis.eta4 {
                Some(e) => solve_proposed(&ctx, Augmentation::NegValues(e), &phi, &solver),
                None => solve_proposed(&ctx, Augmentation::Zero, &phi, &solver),
            };
            record_root(&mut diag, &ph);
            let change = th
                .solution
                .iter()
                .zip(&theta)
                .chain(ph.solution.iter().zip(&phi))
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            theta = th.solution;
            phi = ph.solution;
            if !augment || change < 1e-8 {
                break;
            }
        }
        diag.floored = fit.floored - floored_before;

        let ctx = ScoreContext::new(ds, &model, target, nuis);
        let mut x0 = theta.clone();
        x0.extend(&phi);
        match self.cfg.variant {
            DmlVariant::Dml2 => self.finish(est, System::Eff, &ctx, &x0, diag),
            DmlVariant::Dml1 => self.dml1(est, System::Eff, &ctx, &x0, diag),
        }
    }
}

/// Monotonicity diagnostic of the unaugmented identification equation at
/// the given `phi` values, with the working `pi_p` fitted on the full
/// sample.
pub fn diagnose_identifiability(ds: &DualFrameDataset, spec: &ModelSpec, phis: &[Vec<f64>]) -> Result<DiagnosticReport> {
    let spec = spec.resolve(ds)?;
    let fit = NuisanceFit::full_sample(ds, &spec.nuisance)?;
    let target = MeanTarget;
    let ctx = ScoreContext::new(ds, &spec.model, &target, Nuisance { pi_bar: fit.pi_bar(ds.n_total()), ..Nuisance::default() });
    if let Some(bad) = phis.iter().find(|p| p.len() != ctx.dim_phi()) {
        return Err(Error::Config(format!("phi has {} entries but the sampling model has {}", bad.len(), ctx.dim_phi())));
    }
    monotonicity_diagnostic(&ctx, phis)
}

/// Runs one estimator on a dataset.
pub fn estimate(ds: &DualFrameDataset, cfg: &DmlConfig, spec: &ModelSpec, target: &dyn Target) -> Result<EstimateReport> {
    Estimation::new(ds, cfg.clone(), spec, target)?.run(cfg.estimator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Pattern, UnitRecord};
    use crate::scores::MeanTarget;
    use crate::simgen::{gen_replication, Scenario, ScenarioConfig};

    fn rec(id: u64, pattern: Pattern, y: f64, pi_p: Option<f64>) -> UnitRecord {
        UnitRecord { id, pattern, x: vec![0.0], y: Some(y), pi_p }
    }

    fn small_s1(n_pop: usize, rep: u64) -> DualFrameDataset {
        gen_replication(&ScenarioConfig { n_pop, ..ScenarioConfig::for_scenario(Scenario::S1) }, rep).unwrap()
    }

    #[test]
    fn probability_only_estimator_on_four_units() {
        let ds = DualFrameDataset::new(
            vec![
                rec(1, Pattern::P_ONLY, 1.0, Some(0.5)),
                rec(2, Pattern::P_ONLY, 3.0, Some(0.5)),
                rec(3, Pattern::NP_ONLY, 0.0, None),
                rec(4, Pattern::NP_ONLY, 2.0, None),
            ],
            vec!["x".into()],
        )
        .unwrap();
        let spec = ModelSpec { features: vec!["1".into()], g: vec!["1".into()], ..ModelSpec::default() };
        let r = estimate(&ds, &DmlConfig { estimator: Estimator::P, ..DmlConfig::default() }, &spec, &MeanTarget).unwrap();
        assert!((r.theta_hat[0] - 2.0).abs() < 1e-9);
        assert!(r.se()[0] > 0.0);
        assert!(r.diagnostics.converged);
        assert!(r.phi_hat.is_none());
    }

    #[test]
    fn subeff_reduces_to_kim_tam() {
        let ds = small_s1(3000, 0);
        let mut est = Estimation::new(&ds, DmlConfig::default(), &ModelSpec::default(), &MeanTarget).unwrap();
        let r = est.run(Estimator::Subeff).unwrap();
        let (m, _) = est.gtilde().unwrap();
        let mut total = 0.0;
        for (i, rec) in ds.records().iter().enumerate() {
            total += match (rec.pattern.delta_np, rec.pattern.delta_p) {
                (true, _) => rec.y.unwrap(),
                (false, true) => m[i] + (rec.y.unwrap() - m[i]) / rec.pi_p.unwrap(),
                (false, false) => m[i],
            };
        }
        let closed = total / ds.n_total() as f64;
        assert!((r.theta_hat[0] - closed).abs() < 1e-10, "{} vs {closed}", r.theta_hat[0]);
    }

    #[test]
    fn eff_union_is_eff_with_zero_augmentations() {
        let ds = small_s1(4000, 1);
        let mut est = Estimation::new(&ds, DmlConfig::default(), &ModelSpec::default(), &MeanTarget).unwrap();
        let r = est.run(Estimator::EffUnion).unwrap();
        assert!(r.diagnostics.converged);
        let n = ds.n_total();
        let pi_bar = est.cross_fit().unwrap().pi_bar(n);
        let zeros = vec![vec![0.0; 3]; n];
        let nuis = Nuisance {
            pi_bar: pi_bar.clone(),
            h4: Some(vec![vec![0.0]; n]),
            eta4: Some(zeros),
            gtilde_outcome: None,
        };
        let ctx = ScoreContext::new(&ds, &est.spec.model, &MeanTarget, nuis);
        let bare = ScoreContext::new(&ds, &est.spec.model, &MeanTarget, Nuisance { pi_bar, ..Nuisance::default() });
        let x = r.params();
        for i in 0..n {
            let a = System::Eff.unit(&ctx, i, &x).unwrap();
            let b = System::Eff.unit(&bare, i, &x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-10);
            }
        }
        let g = System::Eff.mean(&ctx, None, &x).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
    }

    #[test]
    fn dml1_averages_fold_roots() {
        let ds = small_s1(3000, 2);
        let cfg = DmlConfig { variant: DmlVariant::Dml1, ..DmlConfig::default() };
        let mut est = Estimation::new(&ds, cfg, &ModelSpec::default(), &MeanTarget).unwrap();
        let r1 = est.run(Estimator::P).unwrap();
        let r2 = estimate(&ds, &DmlConfig { estimator: Estimator::P, ..DmlConfig::default() }, &ModelSpec::default(), &MeanTarget).unwrap();
        // fold means of a linear equation average to a value near the pooled root
        assert!((r1.theta_hat[0] - r2.theta_hat[0]).abs() < 0.5);
        assert!(r1.diagnostics.converged);
        assert_eq!(r1.vcov.len(), 1);
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(Estimator::parse(e.name()).unwrap(), e);
        }
        assert_eq!(Estimator::parse("eff_s").unwrap(), Estimator::Subeff);
        assert!(Estimator::parse("bogus").is_err());
    }

    #[test]
    fn phi_init_length_is_checked() {
        let ds = small_s1(500, 0);
        let spec = ModelSpec { phi_init: Some(vec![0.0; 2]), ..ModelSpec::default() };
        assert!(matches!(spec.resolve(&ds), Err(Error::Config(_))));
    }
}
