//! Feature maps built from short token lists such as `["1", "x1", "x1^2", "y"]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Covariate { index: usize, power: u32 },
    Outcome { power: u32 },
}

/// Ordered list of terms evaluated on a unit's `(x, y)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMap {
    terms: Vec<Term>,
    tokens: Vec<String>,
}

fn split_power(token: &str) -> Result<(&str, u32)> {
    match token.split_once('^') {
        None => Ok((token, 1)),
        Some((base, pow)) => {
            let power = pow
                .trim()
                .parse::<u32>()
                .ok()
                .filter(|&p| p >= 1)
                .ok_or_else(|| Error::Config(format!("bad power in feature `{token}`")))?;
            Ok((base.trim(), power))
        }
    }
}

impl FeatureMap {
    /// Parses tokens against the dataset's covariate names. `"1"` is the
    /// intercept, `"y"` the outcome, and `name^k` a power of a column.
    pub fn parse<S: AsRef<str>>(tokens: &[S], covariate_names: &[String]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("feature list is empty".into()));
        }
        let mut terms = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let tok = tok.as_ref().trim();
            if tok == "1" {
                terms.push(Term::Intercept);
                continue;
            }
            let (base, power) = split_power(tok)?;
            if let Some(index) = covariate_names.iter().position(|c| c == base) {
                terms.push(Term::Covariate { index, power });
            } else if base == "y" {
                terms.push(Term::Outcome { power });
            } else {
                return Err(Error::Config(format!("unknown feature `{tok}`")));
            }
        }
        Ok(FeatureMap {
            terms,
            tokens: tokens.iter().map(|t| t.as_ref().trim().to_string()).collect(),
        })
    }

    pub fn from_terms(terms: Vec<Term>) -> Self {
        let tokens = terms
            .iter()
            .map(|t| match t {
                Term::Intercept => "1".to_string(),
                Term::Covariate { index, power: 1 } => format!("x[{index}]"),
                Term::Covariate { index, power } => format!("x[{index}]^{power}"),
                Term::Outcome { power: 1 } => "y".to_string(),
                Term::Outcome { power } => format!("y^{power}"),
            })
            .collect();
        FeatureMap { terms, tokens }
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn uses_outcome(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, Term::Outcome { .. }))
    }

    /// Evaluates the map; `None` when an outcome term meets a missing `y`.
    pub fn eval(&self, x: &[f64], y: Option<f64>) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            out.push(match *t {
                Term::Intercept => 1.0,
                Term::Covariate { index, power } => x[index].powi(power as i32),
                Term::Outcome { power } => y?.powi(power as i32),
            });
        }
        Some(out)
    }

    /// Evaluates a map that must not reference the outcome.
    pub fn eval_x(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x, None)
            .expect("covariate-only feature map referenced the outcome")
    }
}

/// A function of covariates only, used for calibration functions `g(x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateMap(FeatureMap);

impl CovariateMap {
    pub fn parse<S: AsRef<str>>(tokens: &[S], covariate_names: &[String]) -> Result<Self> {
        let map = FeatureMap::parse(tokens, covariate_names)?;
        if map.uses_outcome() {
            return Err(Error::Config(
                "covariate function may not reference the outcome".into(),
            ));
        }
        Ok(CovariateMap(map))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.0.eval_x(x)
    }
}
