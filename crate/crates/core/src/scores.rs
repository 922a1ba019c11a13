//! Per-unit estimating functions.
//!
//! Every function here returns one unit's contribution; equations are sums
//! over units divided by `N`. Units in neither sample carry no outcome, and
//! every term that would multiply their `y` or `pi_np` is algebraically
//! zero, so those units are short-circuited before any probability is
//! evaluated.

use crate::dataset::{DualFrameDataset, Pattern, UnitRecord};
use crate::error::{Error, Result};
use crate::features::CovariateMap;
use crate::sampling_model::{pi_union, LogisticSamplingModel, NpEval};

/// Estimating function `U(theta; L)` defining the target parameter.
pub trait Target: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, theta: &[f64], x: &[f64], y: f64) -> Vec<f64>;
    fn name(&self) -> &str;
}

/// Population mean: `U(theta; L) = theta - y`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanTarget;

impl Target for MeanTarget {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, theta: &[f64], _x: &[f64], y: f64) -> Vec<f64> {
        vec![theta[0] - y]
    }

    fn name(&self) -> &str {
        "mean"
    }
}

pub fn u_mean(theta: f64, rec: &UnitRecord) -> Result<f64> {
    rec.y.map(|y| theta - y).ok_or_else(|| Error::Evaluation {
        id: rec.id,
        message: "outcome not observed".into(),
    })
}

/// Compensated (Neumaier) summation of vectors.
#[derive(Debug, Clone)]
pub struct VecSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl VecSum {
    pub fn new(dim: usize) -> Self {
        VecSum {
            sum: vec![0.0; dim],
            comp: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, v: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(v) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    pub fn total(&self) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect()
    }
}

/// Cross-fitted or fixed nuisance values, one entry per record.
#[derive(Debug, Clone, Default)]
pub struct Nuisance {
    /// Working probability `pi_bar_p(L)`; NaN where it cannot be evaluated.
    pub pi_bar: Vec<f64>,
    /// `h4*(X)` evaluated at the theta it was fitted for; `None` means zero.
    pub h4: Option<Vec<Vec<f64>>>,
    /// `eta4*(X)`; `None` means zero.
    pub eta4: Option<Vec<Vec<f64>>>,
    /// Outcome surrogate `m(X)` so that `g_tilde(X) = U(theta; X, m(X))`.
    pub gtilde_outcome: Option<Vec<f64>>,
}

/// Augmentation function `k(X)` in the proposed identification equation.
#[derive(Debug, Clone, Copy)]
pub enum Augmentation<'a> {
    Zero,
    /// Per-record values, e.g. the fitted `eta4*`.
    Values(&'a [Vec<f64>]),
    /// Per-record values entering with a minus sign (`k = -eta4*`).
    NegValues(&'a [Vec<f64>]),
    Map(&'a CovariateMap),
}

impl Augmentation<'_> {
    fn at(&self, i: usize, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            Augmentation::Zero => None,
            Augmentation::Values(v) => Some(v[i].clone()),
            Augmentation::NegValues(v) => Some(v[i].iter().map(|a| -a).collect()),
            Augmentation::Map(m) => Some(m.eval(x)),
        }
    }
}

/// Probabilities entering the scores for one sampled unit.
#[derive(Debug, Clone)]
pub struct UnitProbs {
    pub np: NpEval,
    /// Observed `pi_p` inside the probability sample, `pi_bar` elsewhere.
    pub p: f64,
    pub pi_bar: f64,
    pub union: f64,
}

/// Everything needed to evaluate scores on a dataset.
pub struct ScoreContext<'a> {
    pub ds: &'a DualFrameDataset,
    pub model: &'a LogisticSamplingModel,
    pub target: &'a dyn Target,
    pub nuisance: Nuisance,
    features: Vec<Option<Vec<f64>>>,
}

impl<'a> ScoreContext<'a> {
    pub fn new(
        ds: &'a DualFrameDataset,
        model: &'a LogisticSamplingModel,
        target: &'a dyn Target,
        nuisance: Nuisance,
    ) -> Self {
        let features = ds
            .records()
            .iter()
            .map(|r| model.features.eval(&r.x, r.y))
            .collect();
        ScoreContext {
            ds,
            model,
            target,
            nuisance,
            features,
        }
    }

    pub fn n(&self) -> usize {
        self.ds.n_total()
    }

    pub fn dim_phi(&self) -> usize {
        self.model.dim()
    }

    pub fn dim_theta(&self) -> usize {
        self.target.dim()
    }

    fn rec(&self, i: usize) -> &UnitRecord {
        &self.ds.records()[i]
    }

    pub fn np_eval(&self, i: usize, phi: &[f64]) -> Result<NpEval> {
        let v = self.features[i].clone().ok_or_else(|| Error::Evaluation {
            id: self.rec(i).id,
            message: "sampling model uses y but y is not observed".into(),
        })?;
        Ok(self.model.eval_features(phi, v))
    }

    /// Probabilities for unit `i`; uses the exact union when `pi_p` is
    /// observed and the working union otherwise.
    pub fn probs(&self, i: usize, phi: &[f64]) -> Result<UnitProbs> {
        let rec = self.rec(i);
        let np = self.np_eval(i, phi)?;
        let pi_bar = self.nuisance.pi_bar.get(i).copied().unwrap_or(f64::NAN);
        let p = match rec.pi_p {
            Some(p) if rec.pattern.delta_p => p,
            _ => pi_bar,
        };
        if !p.is_finite() {
            return Err(Error::Evaluation {
                id: rec.id,
                message: "no working probability available for this unit".into(),
            });
        }
        let union = pi_union(np.pi, p);
        Ok(UnitProbs { np, p, pi_bar, union })
    }

    fn u(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let rec = self.rec(i);
        let y = rec.y.ok_or_else(|| Error::Evaluation {
            id: rec.id,
            message: "outcome required but not observed".into(),
        })?;
        Ok(self.target.eval(theta, &rec.x, y))
    }

    /// Horvitz–Thompson score from the probability sample alone.
    pub fn ipw_p(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let rec = self.rec(i);
        if !rec.pattern.delta_p {
            return Ok(vec![0.0; self.dim_theta()]);
        }
        let w = 1.0 / rec.pi_p.expect("validated dataset");
        Ok(self.u(i, theta)?.into_iter().map(|u| w * u).collect())
    }

    /// Inverse-probability score from the non-probability sample alone.
    pub fn ipw_np(&self, i: usize, theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let rec = self.rec(i);
        if !rec.pattern.delta_np {
            return Ok(vec![0.0; self.dim_theta()]);
        }
        let w = 1.0 / self.np_eval(i, phi)?.pi;
        Ok(self.u(i, theta)?.into_iter().map(|u| w * u).collect())
    }

    /// Inverse-probability score over the union of the two samples.
    pub fn ipw_union(&self, i: usize, theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let rec = self.rec(i);
        if !rec.pattern.in_union() {
            return Ok(vec![0.0; self.dim_theta()]);
        }
        let w = 1.0 / self.probs(i, phi)?.union;
        Ok(self.u(i, theta)?.into_iter().map(|u| w * u).collect())
    }

    /// Calibration equation `(1 - delta_np / pi_np) g(X)`.
    pub fn chang_kott(&self, i: usize, phi: &[f64], g: &CovariateMap) -> Result<Vec<f64>> {
        check_dim(g.dim(), self.dim_phi())?;
        let rec = self.rec(i);
        let c = if rec.pattern.delta_np {
            1.0 - 1.0 / self.np_eval(i, phi)?.pi
        } else {
            1.0
        };
        Ok(g.eval(&rec.x).into_iter().map(|v| c * v).collect())
    }

    /// Calibration over the union: `(1 - delta_union / pi_union) g(X)`.
    pub fn union_calibration(&self, i: usize, phi: &[f64], g: &CovariateMap) -> Result<Vec<f64>> {
        check_dim(g.dim(), self.dim_phi())?;
        let rec = self.rec(i);
        let c = if rec.pattern.in_union() {
            1.0 - 1.0 / self.probs(i, phi)?.union
        } else {
            1.0
        };
        Ok(g.eval(&rec.x).into_iter().map(|v| c * v).collect())
    }

    /// Mean-zero augmentation residual `R`.
    pub fn residual(&self, i: usize, phi: &[f64]) -> Result<f64> {
        let pat = self.rec(i).pattern;
        if !pat.in_union() {
            return Ok(1.0);
        }
        Ok(residual_r(pat, &self.probs(i, phi)?))
    }

    /// Identification part of the proposed equation (the first line).
    pub fn identification(&self, i: usize, phi: &[f64]) -> Result<Vec<f64>> {
        let pat = self.rec(i).pattern;
        if !pat.in_union() {
            return Ok(vec![0.0; self.dim_phi()]);
        }
        let pr = self.probs(i, phi)?;
        let a = identification_weight(pat, &pr);
        let scale = pr.np.slope / pr.union * a;
        Ok(pr.np.v.iter().map(|v| scale * v).collect())
    }

    /// Proposed equation for `phi` with augmentation `k(X) R`.
    pub fn proposed_phi(&self, i: usize, phi: &[f64], k: Augmentation<'_>) -> Result<Vec<f64>> {
        let mut out = self.identification(i, phi)?;
        if let Some(kv) = k.at(i, &self.rec(i).x) {
            check_dim(kv.len(), self.dim_phi())?;
            let r = self.residual(i, phi)?;
            for (o, k) in out.iter_mut().zip(kv) {
                *o += r * k;
            }
        }
        Ok(out)
    }

    /// Analytic derivative of `proposed_phi` in `phi` (row-major `p × p`),
    /// holding `k` fixed.
    pub fn proposed_phi_jacobian(&self, i: usize, phi: &[f64], k: Augmentation<'_>) -> Result<Vec<f64>> {
        let p = self.dim_phi();
        let mut jac = vec![0.0; p * p];
        let rec = self.rec(i);
        let pat = rec.pattern;
        if !pat.in_union() {
            return Ok(jac);
        }
        let pr = self.probs(i, phi)?;
        if pr.np.clipped() {
            return Ok(jac);
        }
        let (dnp, dp) = (pat.np(), pat.p());
        let pi = pr.np.pi;
        let s = pr.np.slope;
        let u = pr.union;
        let a = identification_weight(pat, &pr);
        let pp = pr.p;
        let inv_pp = if pat.delta_p { 1.0 / pp } else { 0.0 };
        // d a / d pi
        let da = -dnp * (1.0 - dp * inv_pp) * pr.pi_bar_or_p(pat) / (pi * pi)
            - dp * ((dnp / (pi * pi)) / (1.0 - pi) + (1.0 - dnp / pi) / ((1.0 - pi) * (1.0 - pi)));
        let du = 1.0 - pp;
        let coef = a / u * s * (1.0 - 2.0 * pi) + s * s * (da / u - a * du / (u * u));
        let v = &pr.np.v;
        for r in 0..p {
            for c in 0..p {
                jac[r * p + c] = coef * v[r] * v[c];
            }
        }
        if let Some(kv) = k.at(i, &rec.x) {
            let bracket = dnp * (1.0 - dp * inv_pp) + dp * (1.0 - dnp / pi);
            let dr = dnp * dp * inv_pp / (pi * pi) + du / (u * u) * bracket - dp * dnp / (u * pi * pi);
            for r in 0..p {
                for c in 0..p {
                    jac[r * p + c] += kv[r] * dr * s * v[c];
                }
            }
        }
        Ok(jac)
    }

    /// Efficient score for theta.
    pub fn eff_theta(&self, i: usize, theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let pat = self.rec(i).pattern;
        let h4 = self.nuisance.h4.as_ref().map(|h| h[i].as_slice());
        if !pat.in_union() {
            return Ok(match h4 {
                Some(h) => h.to_vec(),
                None => vec![0.0; self.dim_theta()],
            });
        }
        let pr = self.probs(i, phi)?;
        let c = eff_theta_coefficient(pat, &pr);
        let r = residual_r(pat, &pr);
        let mut out: Vec<f64> = self.u(i, theta)?.into_iter().map(|u| c * u).collect();
        if let Some(h) = h4 {
            for (o, hv) in out.iter_mut().zip(h) {
                *o += hv * r;
            }
        }
        Ok(out)
    }

    /// Efficient score for phi: the identification term minus `eta4* R`.
    pub fn eff_phi(&self, i: usize, phi: &[f64]) -> Result<Vec<f64>> {
        match &self.nuisance.eta4 {
            Some(e) => self.proposed_phi(i, phi, Augmentation::NegValues(e)),
            None => self.identification(i, phi),
        }
    }

    /// Stacked `(eff_theta, eff_phi)`.
    pub fn eff_joint(&self, i: usize, theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.eff_theta(i, theta, phi)?;
        out.extend(self.eff_phi(i, phi)?);
        Ok(out)
    }

    /// Sub-efficient score; never touches the non-probability model.
    pub fn subeff(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let rec = self.rec(i);
        let pat = rec.pattern;
        if pat.delta_np {
            return self.u(i, theta);
        }
        let m = self
            .nuisance
            .gtilde_outcome
            .as_ref()
            .ok_or_else(|| Error::Config("sub-efficient score needs a fitted g_tilde".into()))?[i];
        let g = self.target.eval(theta, &rec.x, m);
        if !pat.delta_p {
            return Ok(g);
        }
        let w = 1.0 / rec.pi_p.expect("validated dataset");
        let u = self.u(i, theta)?;
        Ok(u.iter().zip(&g).map(|(u, g)| w * u + (1.0 - w) * g).collect())
    }
}

impl UnitProbs {
    fn pi_bar_or_p(&self, _pat: Pattern) -> f64 {
        if self.pi_bar.is_finite() {
            self.pi_bar
        } else {
            self.p
        }
    }
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Argument(format!(
            "function has dimension {got}, sampling model has {want}"
        )));
    }
    Ok(())
}

/// `R = (1 - dnp dp/(pnp pp)) - dnp/u (1 - dp/pp) - dp/u (1 - dnp/pnp)`.
pub fn residual_r(pat: Pattern, pr: &UnitProbs) -> f64 {
    let (dnp, dp) = (pat.np(), pat.p());
    let pnp = pr.np.pi;
    let inv_pp = if pat.delta_p { 1.0 / pr.p } else { 0.0 };
    (1.0 - dnp * dp * inv_pp / pnp) - dnp / pr.union * (1.0 - dp * inv_pp) - dp / pr.union * (1.0 - dnp / pnp)
}

/// Bracketed weight of the identification term:
/// `(dnp/pnp)(1 - dp/pp) pi_bar - dp/(1 - pnp) (1 - dnp/pnp)`.
fn identification_weight(pat: Pattern, pr: &UnitProbs) -> f64 {
    let (dnp, dp) = (pat.np(), pat.p());
    let pnp = pr.np.pi;
    let inv_pp = if pat.delta_p { 1.0 / pr.p } else { 0.0 };
    let np_part = if pat.delta_np {
        dnp / pnp * (1.0 - dp * inv_pp) * pr.pi_bar_or_p(pat)
    } else {
        0.0
    };
    np_part - dp / (1.0 - pnp) * (1.0 - dnp / pnp)
}

/// Coefficient of `U(theta)` in the efficient theta score.
fn eff_theta_coefficient(pat: Pattern, pr: &UnitProbs) -> f64 {
    let (dnp, dp) = (pat.np(), pat.p());
    let inv_pp = if pat.delta_p { 1.0 / pr.p } else { 0.0 };
    dp * inv_pp + (1.0 - dp * inv_pp) / pr.union * (dnp - dp * (dnp - pr.np.pi))
}

/// Mean over `subset` (or all records) of a per-unit function, with
/// compensated summation. Divides by the subset size.
pub fn mean_over<F>(n_total: usize, subset: Option<&[usize]>, dim: usize, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut acc = VecSum::new(dim);
    let count = match subset {
        Some(s) => {
            for &i in s {
                acc.add(&f(i)?);
            }
            s.len()
        }
        None => {
            for i in 0..n_total {
                acc.add(&f(i)?);
            }
            n_total
        }
    };
    Ok(acc.total().into_iter().map(|v| v / count as f64).collect())
}
