//! Sandwich variances, Wald intervals and Monte Carlo summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::solver::pinv;

/// `(1/n) J^{-1} Omega J^{-T}` with `Omega` the mean outer product of the
/// per-unit scores. The result is symmetrized; the flag reports whether `J`
/// had to be pseudo-inverted.
pub fn sandwich(scores: &[Vec<f64>], jac: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, bool) {
    let p = jac.ncols();
    let mut omega = DMatrix::<f64>::zeros(jac.nrows(), jac.nrows());
    for s in scores {
        for r in 0..s.len() {
            for c in r..s.len() {
                omega[(r, c)] += s[r] * s[c];
            }
        }
    }
    for r in 0..omega.nrows() {
        for c in 0..r {
            omega[(r, c)] = omega[(c, r)];
        }
    }
    omega /= n as f64;
    let (jinv, pseudo) = match jac.clone().try_inverse() {
        Some(inv) if jac.is_square() && inv.iter().all(|v| v.is_finite()) && well_conditioned(jac) => (inv, false),
        _ => (pinv(jac), true),
    };
    let v = &jinv * omega * jinv.transpose() / n as f64;
    let sym = (&v + v.transpose()) * 0.5;
    debug_assert_eq!(sym.nrows(), p);
    (sym, pseudo)
}

fn well_conditioned(j: &DMatrix<f64>) -> bool {
    let s = j.clone().svd(false, false).singular_values;
    s.min() > 1e-12 * s.max()
}

/// Standard normal quantile `z_{1 - alpha/2}` for a two-sided level.
pub fn normal_quantile(level: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).expect("standard normal");
    z.inverse_cdf(0.5 + level / 2.0)
}

/// Wald intervals `est ± z se`.
pub fn wald(est: &[f64], se: &[f64], level: f64) -> Vec<(f64, f64)> {
    let z = normal_quantile(level);
    est.iter().zip(se).map(|(e, s)| (e - z * s, e + z * s)).collect()
}

/// Solver and nuisance bookkeeping attached to a report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub final_norm: f64,
    pub pseudo_inverse: bool,
    /// Ratio denominators that hit the floor.
    pub floored: usize,
    /// The augmented `phi` step was discarded for the preliminary root.
    pub phi_fallback: bool,
    /// Nuisance refreshes performed in the alternating solve.
    pub refreshes: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub theta_hat: Vec<f64>,
    pub phi_hat: Option<Vec<f64>>,
    /// Covariance of `(theta, phi)` stacked (or `theta` alone).
    pub vcov: Vec<Vec<f64>>,
    pub level: f64,
    /// Intervals for the stacked parameter vector.
    pub ci: Vec<(f64, f64)>,
    pub n_total: usize,
    pub n_np: usize,
    pub n_p: usize,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.theta_hat.clone();
        if let Some(p) = &self.phi_hat {
            v.extend(p);
        }
        v
    }

    pub fn se(&self) -> Vec<f64> {
        (0..self.vcov.len()).map(|j| self.vcov[j][j].max(0.0).sqrt()).collect()
    }

    pub fn theta_se(&self) -> Vec<f64> {
        self.se()[..self.theta_hat.len()].to_vec()
    }

    pub fn phi_se(&self) -> Option<Vec<f64>> {
        self.phi_hat.as_ref().map(|_| self.se()[self.theta_hat.len()..].to_vec())
    }

    /// Recomputes the Wald intervals at `level`.
    pub fn confint(&self, level: f64) -> Vec<(f64, f64)> {
        wald(&self.params(), &self.se(), level)
    }
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// One replication's result for a scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub estimate: f64,
    /// Interval, when available.
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub replications: usize,
    /// Replications without an estimate (solver failures).
    pub failed: usize,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub coverage: f64,
    /// Replications contributing to `coverage`.
    pub covered_of: usize,
    /// Jackknife standard error of `sd`.
    pub sd_jackknife_se: f64,
}

impl McSummary {
    /// `(bias, sd, rmse)` multiplied by 1000.
    pub fn scaled(&self) -> (f64, f64, f64) {
        (self.bias * 1e3, self.sd * 1e3, self.rmse * 1e3)
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Leave-one-out jackknife standard error of `stat` over paired rows.
pub fn jackknife_se<T: Clone>(rows: &[T], stat: impl Fn(&[T]) -> f64) -> f64 {
    let r = rows.len();
    if r < 3 {
        return f64::NAN;
    }
    let loo: Vec<f64> = (0..r)
        .map(|i| {
            let sub: Vec<T> = rows.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v.clone()).collect();
            stat(&sub)
        })
        .collect();
    let m = loo.iter().sum::<f64>() / r as f64;
    ((r as f64 - 1.0) / r as f64 * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt()
}

/// Jackknife standard error of `sd(a) - sd(b)` over paired replications.
pub fn sd_gap_jackknife(a: &[f64], b: &[f64]) -> f64 {
    let rows: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    jackknife_se(&rows, |s| {
        let (x, y): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
        sample_sd(&x) - sample_sd(&y)
    })
}

/// Bias, SD (with `R - 1` denominator), RMSE and interval coverage.
/// `None` draws count as failures and are excluded everywhere.
pub fn mc_summary(draws: &[Option<Draw>], truth: f64) -> McSummary {
    let ok: Vec<Draw> = draws.iter().flatten().copied().collect();
    let est: Vec<f64> = ok.iter().map(|d| d.estimate).collect();
    let r = est.len();
    let mean = est.iter().sum::<f64>() / r as f64;
    let bias = mean - truth;
    let sd = if r > 1 { sample_sd(&est) } else { f64::NAN };
    let rmse = (est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r as f64).sqrt();
    let with_ci: Vec<(f64, f64)> = ok.iter().filter_map(|d| d.ci).collect();
    let hits = with_ci.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count();
    McSummary {
        replications: draws.len(),
        failed: draws.len() - r,
        mean,
        bias,
        sd,
        rmse,
        coverage: hits as f64 / with_ci.len().max(1) as f64,
        covered_of: with_ci.len(),
        sd_jackknife_se: jackknife_se(&est, sample_sd),
    }
}
