//! Inclusion-probability models: the logistic non-probability model, the
//! union of the two samples, and the harmonic-mean working probability
//! that stands in for `pi_p` outside the probability sample.

use std::sync::Arc;

use crate::dataset::{DualFrameDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::nuisance::krr::{KernelBasis, KrrConfig, KrrModel};

pub const DEFAULT_EPS: f64 = 1e-3;

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `logit P(delta_np = 1 | L) = phiᵀ V(L)`, truncated to `[eps, 1 - eps]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticSamplingModel {
    pub phi: Vec<f64>,
    pub features: FeatureMap,
    pub eps: f64,
}

/// Probability, its gradient scale and the features at one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NpEval {
    pub pi: f64,
    /// `pi (1 - pi)`, or zero when the probability was clipped.
    pub slope: f64,
    pub v: Vec<f64>,
}

impl NpEval {
    pub fn clipped(&self) -> bool {
        self.slope == 0.0
    }

    pub fn gradient(&self) -> Vec<f64> {
        self.v.iter().map(|v| self.slope * v).collect()
    }
}

impl LogisticSamplingModel {
    pub fn new(phi: Vec<f64>, features: FeatureMap, eps: f64) -> Result<Self> {
        if phi.len() != features.dim() {
            return Err(Error::Argument(format!(
                "phi has {} entries but the feature map has {}",
                phi.len(),
                features.dim()
            )));
        }
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::Argument(format!("eps must lie in (0, 0.5), got {eps}")));
        }
        Ok(LogisticSamplingModel { phi, features, eps })
    }

    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    pub fn with_phi(&self, phi: &[f64]) -> Self {
        LogisticSamplingModel {
            phi: phi.to_vec(),
            features: self.features.clone(),
            eps: self.eps,
        }
    }

    /// Truncated probability for a linear predictor, and whether it was clipped.
    pub fn prob_from_linear(&self, eta: f64) -> (f64, bool) {
        let p = expit(eta);
        if p < self.eps {
            (self.eps, true)
        } else if p > 1.0 - self.eps {
            (1.0 - self.eps, true)
        } else {
            (p, false)
        }
    }

    pub fn eval_features(&self, phi: &[f64], v: Vec<f64>) -> NpEval {
        let eta: f64 = phi.iter().zip(&v).map(|(a, b)| a * b).sum();
        let (pi, clipped) = self.prob_from_linear(eta);
        NpEval {
            pi,
            slope: if clipped { 0.0 } else { pi * (1.0 - pi) },
            v,
        }
    }

    pub fn features_of(&self, rec: &UnitRecord) -> Result<Vec<f64>> {
        self.features.eval(&rec.x, rec.y).ok_or_else(|| Error::Evaluation {
            id: rec.id,
            message: "sampling model uses y but y is not observed".into(),
        })
    }

    pub fn eval_at(&self, phi: &[f64], rec: &UnitRecord) -> Result<NpEval> {
        Ok(self.eval_features(phi, self.features_of(rec)?))
    }

    pub fn eval(&self, rec: &UnitRecord) -> Result<NpEval> {
        self.eval_at(&self.phi, rec)
    }

    pub fn pi_np(&self, rec: &UnitRecord) -> Result<f64> {
        Ok(self.eval(rec)?.pi)
    }

    /// Gradient of the logistic probability in `phi`; zero where clipped.
    pub fn dpi_np(&self, rec: &UnitRecord) -> Result<Vec<f64>> {
        Ok(self.eval(rec)?.gradient())
    }
}

/// Inclusion–exclusion probability of appearing in at least one sample.
pub fn pi_union(p_np: f64, p_p: f64) -> f64 {
    p_np + p_p - p_np * p_p
}

/// How `E(1/pi_p | L, delta_p = 1)` is learned.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanLearner {
    /// Sample mean, ignoring `L`.
    Constant,
    Krr(KrrConfig),
}

#[derive(Debug, Clone)]
enum PiBarFit {
    Constant(f64),
    Krr(KrrModel),
}

/// Working probability `1 / E(1/pi_p | L, delta_p = 1)`.
#[derive(Debug, Clone)]
pub struct PiBarModel {
    fit: PiBarFit,
    use_outcome: bool,
}

fn pibar_inputs(rec: &UnitRecord, use_outcome: bool) -> Option<Vec<f64>> {
    let mut v = rec.x.clone();
    if use_outcome {
        v.push(rec.y?);
    }
    Some(v)
}

impl PiBarModel {
    pub fn constant(pi_bar: f64) -> Self {
        PiBarModel {
            fit: PiBarFit::Constant(1.0 / pi_bar),
            use_outcome: false,
        }
    }

    /// Fitted `E(1/pi_p | L)`, floored at 1.
    pub fn inverse(&self, rec: &UnitRecord) -> Result<f64> {
        let raw = match &self.fit {
            PiBarFit::Constant(c) => *c,
            PiBarFit::Krr(m) => {
                let input = pibar_inputs(rec, self.use_outcome).ok_or_else(|| Error::Evaluation {
                    id: rec.id,
                    message: "working probability uses y but y is not observed".into(),
                })?;
                m.predict(&input)
            }
        };
        Ok(raw.max(1.0))
    }

    pub fn predict(&self, rec: &UnitRecord) -> Result<f64> {
        Ok(1.0 / self.inverse(rec)?)
    }

    pub fn uses_outcome(&self) -> bool {
        self.use_outcome
    }
}

/// Regresses `1/pi_p` on `L = (x, y)` (or `x` alone when `use_outcome` is
/// false) over the probability-sample records among `subset`.
pub fn fit_pi_bar_on(
    ds: &DualFrameDataset,
    subset: &[usize],
    learner: &MeanLearner,
    use_outcome: bool,
) -> Result<PiBarModel> {
    let recs = ds.records();
    let train: Vec<&UnitRecord> = subset
        .iter()
        .map(|&i| &recs[i])
        .filter(|r| r.pattern.delta_p)
        .collect();
    if train.len() < 2 {
        return Err(Error::Fit(format!(
            "working probability needs at least 2 probability-sample records, got {}",
            train.len()
        )));
    }
    let ys: Vec<f64> = train
        .iter()
        .map(|r| 1.0 / r.pi_p.expect("validated dataset"))
        .collect();
    let fit = match learner {
        MeanLearner::Constant => PiBarFit::Constant(ys.iter().sum::<f64>() / ys.len() as f64),
        MeanLearner::Krr(cfg) => {
            let xs: Vec<Vec<f64>> = train
                .iter()
                .map(|r| pibar_inputs(r, use_outcome).expect("sampled units carry y"))
                .collect();
            let basis = Arc::new(KernelBasis::new(xs, cfg.bandwidth, cfg.tol)?);
            PiBarFit::Krr(basis.fit(&ys, &cfg.lambda, cfg.intercept)?)
        }
    };
    Ok(PiBarModel { fit, use_outcome })
}

pub fn fit_pi_bar(ds: &DualFrameDataset, learner: &MeanLearner, use_outcome: bool) -> Result<PiBarModel> {
    let all: Vec<usize> = (0..ds.n_total()).collect();
    fit_pi_bar_on(ds, &all, learner, use_outcome)
}

/// `pi_p` for a unit: observed inside the probability sample, the working
/// value elsewhere.
pub fn effective_pi_p(pi_bar: f64, rec: &UnitRecord) -> f64 {
    match rec.pi_p {
        Some(p) if rec.pattern.delta_p => p,
        _ => pi_bar,
    }
}

/// Union probability with the observed `pi_p` when available and the
/// working value otherwise.
pub fn working_pi_union(model: &LogisticSamplingModel, pi_bar: &PiBarModel, rec: &UnitRecord) -> Result<f64> {
    let p_np = model.pi_np(rec)?;
    let p_p = if rec.pattern.delta_p {
        effective_pi_p(f64::NAN, rec)
    } else {
        pi_bar.predict(rec)?
    };
    Ok(pi_union(p_np, p_p))
}
