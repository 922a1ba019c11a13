//! Closed-form projections onto the two-stage nuisance tangent space and
//! its restricted subspace, on a finite support. Used as test oracles.
//!
//! An element of the Hilbert space is stored by its three pattern
//! components: `h1` on NP units, `h2` on P-only units and `h3` on unsampled
//! units. Under the two-stage design the pattern probabilities given `L` are
//! `pi_np`, `(1 - pi_np) pi_p` and `(1 - pi_np)(1 - pi_p)`.

use crate::error::{Error, Result};
use crate::scores::VecSum;

/// Finite support of `L`. Points sharing `group` share the same `X`.
#[derive(Debug, Clone)]
pub struct FiniteSupport {
    pub weight: Vec<f64>,
    pub group: Vec<usize>,
    pub pi_np: Vec<f64>,
    pub pi_p: Vec<f64>,
}

/// Pattern components, one value per support point.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub h3: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Lambda2Projection {
    pub g1: Vec<f64>,
    pub g3: Vec<f64>,
}

impl FiniteSupport {
    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Argument("empty support".into()));
        }
        if self.group.len() != n || self.pi_np.len() != n || self.pi_p.len() != n {
            return Err(Error::Argument("support arrays differ in length".into()));
        }
        let open = |p: &f64| *p > 0.0 && *p < 1.0;
        if !self.pi_np.iter().all(open) || !self.pi_p.iter().all(open) {
            return Err(Error::Argument("probabilities must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn pi_union(&self, j: usize) -> f64 {
        let (a, b) = (self.pi_np[j], self.pi_p[j]);
        a + b - a * b
    }

    /// `E(f | X)` evaluated back on every support point.
    fn cond_x(&self, f: &[f64]) -> Vec<f64> {
        let groups = self.group.iter().max().map_or(0, |g| g + 1);
        let mut num = vec![0.0; groups];
        let mut den = vec![0.0; groups];
        for j in 0..self.len() {
            num[self.group[j]] += self.weight[j] * f[j];
            den[self.group[j]] += self.weight[j];
        }
        self.group.iter().map(|&g| num[g] / den[g]).collect()
    }

    /// `E(a b)` over patterns and support.
    pub fn inner(&self, a: &Components, b: &Components) -> f64 {
        let mut acc = VecSum::new(1);
        for j in 0..self.len() {
            let (pn, pp) = (self.pi_np[j], self.pi_p[j]);
            let v = pn * a.h1[j] * b.h1[j]
                + (1.0 - pn) * pp * a.h2[j] * b.h2[j]
                + (1.0 - pn) * (1.0 - pp) * a.h3[j] * b.h3[j];
            acc.add(&[self.weight[j] * v]);
        }
        acc.total()[0]
    }

    /// `g1 [(1 - dnp/pnp) - (1 - dnp)(1 - dp/pp)] + g3 (1 - dnp/pnp)`.
    pub fn lambda2_element(&self, g1: &[f64], g3: &[f64]) -> Components {
        let n = self.len();
        let mut out = Components { h1: vec![0.0; n], h2: vec![0.0; n], h3: vec![0.0; n] };
        for j in 0..n {
            out.h1[j] = (g1[j] + g3[j]) * (1.0 - 1.0 / self.pi_np[j]);
            out.h2[j] = g1[j] / self.pi_p[j] + g3[j];
            out.h3[j] = g3[j];
        }
        out
    }

    /// `(1 - dnp)(1 - dp/pp) g`.
    pub fn tilde_element(&self, g: &[f64]) -> Components {
        let n = self.len();
        Components {
            h1: vec![0.0; n],
            h2: (0..n).map(|j| (1.0 - 1.0 / self.pi_p[j]) * g[j]).collect(),
            h3: g.to_vec(),
        }
    }
}

fn check_components(s: &FiniteSupport, h: &Components) -> Result<()> {
    s.check()?;
    let n = s.len();
    if h.h1.len() != n || h.h2.len() != n || h.h3.len() != n {
        return Err(Error::Argument("components do not match the support".into()));
    }
    Ok(())
}

/// Projection onto the full two-stage tangent space.
pub fn project_lambda2(s: &FiniteSupport, h: &Components) -> Result<Lambda2Projection> {
    check_components(s, h)?;
    let n = s.len();
    let mut num = vec![0.0; n];
    let mut odds = vec![0.0; n];
    for j in 0..n {
        let pu = s.pi_union(j);
        let o = (1.0 - pu) / pu;
        odds[j] = o;
        num[j] = (1.0 - pu) * (h.h3[j] - h.h2[j]) + o * s.pi_np[j] * (h.h2[j] - h.h1[j]);
    }
    let (en, eo) = (s.cond_x(&num), s.cond_x(&odds));
    let g3: Vec<f64> = en.iter().zip(&eo).map(|(a, b)| a / b).collect();
    let g1 = (0..n)
        .map(|j| s.pi_p[j] * (s.pi_np[j] * (h.h2[j] - h.h1[j]) - g3[j]) / s.pi_union(j))
        .collect();
    Ok(Lambda2Projection { g1, g3 })
}

/// Coefficient `g~3` of the projection onto the restricted subspace.
pub fn project_lambda2_tilde(s: &FiniteSupport, h: &Components) -> Result<Vec<f64>> {
    check_components(s, h)?;
    let n = s.len();
    let q = |j: usize| (1.0 - s.pi_np[j]) * (1.0 - s.pi_p[j]);
    let num: Vec<f64> = (0..n).map(|j| q(j) * (h.h3[j] - h.h2[j])).collect();
    let den: Vec<f64> = (0..n).map(|j| q(j) / s.pi_p[j]).collect();
    let (en, ed) = (s.cond_x(&num), s.cond_x(&den));
    Ok(en.iter().zip(&ed).map(|(a, b)| a / b).collect())
}
