//! Damped Newton root finding, the two-step solve for `phi`, and the
//! monotonicity diagnostic for the identification equation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::sandwich;
use crate::scores::{mean_over, Augmentation, ScoreContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianMode {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Stop when `max |G| <= tol`.
    pub tol: f64,
    /// Maximum number of step halvings per iteration.
    pub damping: usize,
    pub jacobian: JacobianMode,
    /// Cap on the sup-norm of a Newton step. The `phi` solves use
    /// [`PHI_MAX_STEP`] when unset.
    pub max_step: Option<f64>,
}

/// Default step cap for `phi`, on the logit scale.
pub const PHI_MAX_STEP: f64 = 1.0;

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 100,
            tol: 1e-10,
            damping: 30,
            jacobian: JacobianMode::Analytic,
            max_step: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 || !(self.tol > 0.0) {
            return Err(Error::Config("solver needs max_iter >= 1 and tol > 0".into()));
        }
        if self.max_step.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::Config("max_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RootResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub final_norm: f64,
    pub converged: bool,
    pub jacobian_at_root: DMatrix<f64>,
    /// A singular Jacobian forced at least one pseudo-inverse step.
    pub pseudo_inverse: bool,
    pub message: Option<String>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) })
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Central-difference Jacobian with step `1e-5 (1 + |x_j|)`.
pub fn numeric_jacobian<F>(g: &mut F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let p = x.len();
    let mut cols = Vec::with_capacity(p);
    let mut xt = x.to_vec();
    let mut m = 0;
    for j in 0..p {
        let h = 1e-5 * (1.0 + x[j].abs());
        xt[j] = x[j] + h;
        let up = g(&xt)?;
        xt[j] = x[j] - h;
        let dn = g(&xt)?;
        xt[j] = x[j];
        m = up.len();
        cols.push(up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    Ok(DMatrix::from_fn(m, p, |r, c| cols[c][r]))
}

/// Pseudo-inverse with the usual relative singular-value cutoff.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eps = 1e-12 * a.nrows().max(a.ncols()) as f64;
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.pseudo_inverse(eps * smax.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.nrows()))
}

/// Solves `J d = g`; falls back to the pseudo-inverse when `J` is singular
/// or badly conditioned. Returns the step and whether the fallback was used.
pub fn newton_step(jac: &DMatrix<f64>, g: &[f64]) -> (Vec<f64>, bool) {
    let gv = DVector::from_column_slice(g);
    if jac.is_square() {
        let svd = jac.clone().svd(false, false);
        let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
        if smin > 1e-12 * smax {
            if let Some(d) = jac.clone().lu().solve(&gv) {
                if d.iter().all(|v| v.is_finite()) {
                    return (d.iter().copied().collect(), false);
                }
            }
        }
    }
    ((pinv(jac) * gv).iter().copied().collect(), true)
}

/// Damped Newton iteration on `g` with an optional analytic Jacobian.
/// Never panics; failures are reported through `converged = false`.
pub fn solve_root_with<F, J>(mut g: F, mut jac: Option<J>, x0: &[f64], cfg: &SolverConfig) -> RootResult
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    J: FnMut(&[f64]) -> Result<DMatrix<f64>>,
{
    let mut x = x0.to_vec();
    let mut pseudo = false;
    let fail = |x: Vec<f64>, it: usize, norm: f64, pseudo: bool, msg: String| RootResult {
        jacobian_at_root: DMatrix::zeros(x.len(), x.len()),
        solution: x,
        iterations: it,
        final_norm: norm,
        converged: false,
        pseudo_inverse: pseudo,
        message: Some(msg),
    };
    let mut gx = match g(&x) {
        Ok(v) => v,
        Err(e) => return fail(x, 0, f64::INFINITY, false, e.to_string()),
    };
    let mut eval_jac = |g: &mut F, x: &[f64]| -> Result<DMatrix<f64>> {
        match (&mut jac, cfg.jacobian) {
            (Some(j), JacobianMode::Analytic) => j(x),
            _ => numeric_jacobian(g, x),
        }
    };
    let mut iterations = 0;
    let mut message = None;
    while inf_norm(&gx) > cfg.tol && iterations < cfg.max_iter {
        iterations += 1;
        let j = match eval_jac(&mut g, &x) {
            Ok(j) => j,
            Err(e) => return fail(x, iterations, inf_norm(&gx), pseudo, e.to_string()),
        };
        let (mut d, used_pinv) = newton_step(&j, &gx);
        pseudo |= used_pinv;
        if let Some(cap) = cfg.max_step {
            let big = inf_norm(&d);
            if big > cap {
                d.iter_mut().for_each(|v| *v *= cap / big);
            }
        }
        let merit = sq_norm(&gx);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.damping {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - step * b).collect();
            if let Ok(gt) = g(&xt) {
                let m = sq_norm(&gt);
                if m.is_finite() && m < merit {
                    accepted = Some((xt, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((xt, gt)) => {
                x = xt;
                gx = gt;
            }
            None => {
                message = Some("line search failed to reduce the residual".to_string());
                break;
            }
        }
    }
    let final_norm = inf_norm(&gx);
    let converged = final_norm <= cfg.tol;
    let jacobian_at_root = eval_jac(&mut g, &x).unwrap_or_else(|_| DMatrix::zeros(gx.len(), x.len()));
    if !converged && message.is_none() {
        message = Some(format!("no convergence after {iterations} iterations"));
    }
    RootResult {
        solution: x,
        iterations,
        final_norm,
        converged,
        jacobian_at_root,
        pseudo_inverse: pseudo,
        message,
    }
}

/// Damped Newton with central-difference Jacobians.
pub fn solve_root<F>(g: F, x0: &[f64], cfg: &SolverConfig) -> RootResult
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let cfg = SolverConfig { jacobian: JacobianMode::Numeric, ..cfg.clone() };
    solve_root_with(g, None::<fn(&[f64]) -> Result<DMatrix<f64>>>, x0, &cfg)
}

/// Mean of the proposed `phi` equation over all records.
pub fn proposed_equation(ctx: &ScoreContext<'_>, phi: &[f64], k: Augmentation<'_>) -> Result<Vec<f64>> {
    mean_over(ctx.n(), None, ctx.dim_phi(), |i| ctx.proposed_phi(i, phi, k))
}

/// Analytic Jacobian of [`proposed_equation`].
pub fn proposed_jacobian(ctx: &ScoreContext<'_>, phi: &[f64], k: Augmentation<'_>) -> Result<DMatrix<f64>> {
    let p = ctx.dim_phi();
    let flat = mean_over(ctx.n(), None, p * p, |i| ctx.proposed_phi_jacobian(i, phi, k))?;
    Ok(DMatrix::from_row_slice(p, p, &flat))
}

/// Solves the proposed `phi` equation with augmentation `k`.
pub fn solve_proposed(ctx: &ScoreContext<'_>, k: Augmentation<'_>, x0: &[f64], cfg: &SolverConfig) -> RootResult {
    let cfg = &SolverConfig { max_step: cfg.max_step.or(Some(PHI_MAX_STEP)), ..cfg.clone() };
    solve_root_with(
        |phi: &[f64]| proposed_equation(ctx, phi, k),
        Some(|phi: &[f64]| proposed_jacobian(ctx, phi, k)),
        x0,
        cfg,
    )
}

/// Sandwich covariance of a `phi` root of the proposed equation.
pub fn proposed_covariance(ctx: &ScoreContext<'_>, k: Augmentation<'_>, root: &RootResult) -> Result<DMatrix<f64>> {
    let phi = &root.solution;
    let scores = (0..ctx.n())
        .map(|i| ctx.proposed_phi(i, phi, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(sandwich(&scores, &root.jacobian_at_root, ctx.n()).0)
}

#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub preliminary: RootResult,
    pub result: RootResult,
    /// Step two diverged or left the acceptance region.
    pub fell_back: bool,
}

/// Two-step `phi`: first the unaugmented equation from `x0`, then the
/// equation augmented with `k` started at the preliminary root. Step two is
/// discarded when it fails or moves any coordinate further than
/// `radius_mult` preliminary standard errors.
pub fn solve_phi_two_step(
    ctx: &ScoreContext<'_>,
    k: Augmentation<'_>,
    x0: &[f64],
    cfg: &SolverConfig,
    radius_mult: f64,
) -> Result<TwoStepResult> {
    let preliminary = solve_proposed(ctx, Augmentation::Zero, x0, cfg);
    if !preliminary.converged {
        return Err(Error::Estimation(format!(
            "preliminary phi solve failed: {}",
            preliminary.message.clone().unwrap_or_default()
        )));
    }
    if matches!(k, Augmentation::Zero) {
        return Ok(TwoStepResult { result: preliminary.clone(), preliminary, fell_back: false });
    }
    let cov = proposed_covariance(ctx, Augmentation::Zero, &preliminary)?;
    let second = solve_proposed(ctx, k, &preliminary.solution, cfg);
    let inside = second
        .solution
        .iter()
        .zip(&preliminary.solution)
        .enumerate()
        .all(|(j, (a, b))| (a - b).abs() <= radius_mult * cov[(j, j)].max(0.0).sqrt());
    if second.converged && inside {
        Ok(TwoStepResult { preliminary, result: second, fell_back: false })
    } else {
        Ok(TwoStepResult { result: preliminary.clone(), preliminary, fell_back: true })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticPoint {
    pub phi: Vec<f64>,
    pub max_eigenvalue: Option<f64>,
    pub jacobian_norm: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticReport {
    pub points: Vec<DiagnosticPoint>,
    pub pass: bool,
}

/// Relative margin below zero required of the largest eigenvalue.
pub const DIAGNOSTIC_REL_TOL: f64 = 1e-6;

/// Largest eigenvalue of the symmetric part of the numeric Jacobian of the
/// unaugmented identification equation at each `phi`. Passes when every
/// point is negative definite beyond a relative margin.
pub fn monotonicity_diagnostic(ctx: &ScoreContext<'_>, phi_samples: &[Vec<f64>]) -> Result<DiagnosticReport> {
    monotonicity_diagnostic_for(|phi: &[f64]| proposed_equation(ctx, phi, Augmentation::Zero), phi_samples)
}

/// `count` points drawn uniformly from the box `center ± half_width`.
pub fn phi_draws(center: &[f64], half_width: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| center.iter().map(|c| c + half_width * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .collect()
}

/// Diagnostic for an arbitrary equation `g`.
pub fn monotonicity_diagnostic_for<F>(mut g: F, phi_samples: &[Vec<f64>]) -> Result<DiagnosticReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if phi_samples.is_empty() {
        return Err(Error::Argument("diagnostic needs at least one phi".into()));
    }
    let mut points = Vec::with_capacity(phi_samples.len());
    for phi in phi_samples {
        points.push(match numeric_jacobian(&mut g, phi) {
            Ok(j) => {
                let sym = (&j + j.transpose()) * 0.5;
                let eig = SymmetricEigen::new(sym).eigenvalues;
                DiagnosticPoint {
                    phi: phi.clone(),
                    max_eigenvalue: Some(eig.max()),
                    jacobian_norm: Some(j.norm()),
                    error: None,
                }
            }
            Err(e) => DiagnosticPoint {
                phi: phi.clone(),
                max_eigenvalue: None,
                jacobian_norm: None,
                error: Some(e.to_string()),
            },
        });
    }
    let pass = points.iter().all(|p| match (p.max_eigenvalue, p.jacobian_norm) {
        (Some(e), Some(n)) => e < -DIAGNOSTIC_REL_TOL * n,
        _ => false,
    });
    Ok(DiagnosticReport { points, pass })
}
