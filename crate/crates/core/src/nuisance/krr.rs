//! Gaussian-kernel ridge regression.
//!
//! The kernel matrix is factored once per training set with a pivoted
//! Cholesky decomposition `K ≈ G Gᵀ` (stopped when the largest residual
//! diagonal falls below `tol`), then orthonormalised to `K ≈ U diag(s²) Uᵀ`.
//! Every regression sharing the training covariates reuses that basis, so a
//! new response vector costs `O(n r)` and generalized cross-validation over a
//! λ grid is essentially free.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lambda {
    Fixed(f64),
    /// Pick the grid value minimising generalized cross-validation.
    Gcv(Vec<f64>),
}

impl Lambda {
    /// Nine log-spaced values from 1e-4 to 1.
    pub fn default_grid() -> Lambda {
        Lambda::Gcv((0..9).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KrrConfig {
    pub lambda: Lambda,
    pub bandwidth: Bandwidth,
    /// Fit around the sample mean of the response.
    pub intercept: bool,
    /// Residual-diagonal threshold for the low-rank factorization.
    pub tol: f64,
}

impl Default for KrrConfig {
    fn default() -> Self {
        KrrConfig {
            lambda: Lambda::default_grid(),
            bandwidth: Bandwidth::Median,
            intercept: true,
            tol: 1e-12,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Median pairwise Euclidean distance, over an evenly strided subsample of
/// at most 1000 rows. Falls back to 1 when the median is zero.
pub fn median_heuristic(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let m = n.min(1000);
    let stride = n as f64 / m as f64;
    let sub: Vec<&Vec<f64>> = (0..m).map(|i| &points[(i as f64 * stride) as usize]).collect();
    let mut d = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            d.push(sq_dist(sub[i], sub[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if *med > 0.0 {
        *med
    } else {
        1.0
    }
}

/// Training covariates together with the spectral factorization of their
/// Gaussian kernel matrix.
#[derive(Debug)]
pub struct KernelBasis {
    points: Vec<Vec<f64>>,
    gamma: f64,
    bandwidth: f64,
    /// n × r, orthonormal columns.
    u: DMatrix<f64>,
    s2: Vec<f64>,
}

impl KernelBasis {
    pub fn new(points: Vec<Vec<f64>>, bandwidth: Bandwidth, tol: f64) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::Fit(format!("kernel regression needs at least 2 rows, got {n}")));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Fit("kernel regression rows must be finite and equal length".into()));
        }
        let bw = match bandwidth {
            Bandwidth::Median => median_heuristic(&points),
            Bandwidth::Fixed(b) if b > 0.0 => b,
            Bandwidth::Fixed(b) => return Err(Error::Argument(format!("bandwidth must be positive, got {b}"))),
        };
        let gamma = 1.0 / (2.0 * bw * bw);

        // Pivoted Cholesky on the unit-diagonal Gaussian kernel.
        let mut diag = vec![1.0_f64; n];
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < n {
            let (piv, &dmax) = diag
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty");
            if dmax <= tol {
                break;
            }
            let root = dmax.sqrt();
            let mut col = vec![0.0; n];
            for (i, c) in col.iter_mut().enumerate() {
                // exhausted rows (earlier pivots included) have a zero entry
                if diag[i] == 0.0 && i != piv {
                    continue;
                }
                let mut v = (-gamma * sq_dist(&points[i], &points[piv])).exp();
                for g in &cols {
                    v -= g[i] * g[piv];
                }
                *c = v / root;
            }
            for (i, d) in diag.iter_mut().enumerate() {
                *d = (*d - col[i] * col[i]).max(0.0);
            }
            diag[piv] = 0.0;
            cols.push(col);
        }
        let r = cols.len();
        let g = DMatrix::from_fn(n, r, |i, j| cols[j][i]);
        let gram = g.transpose() * &g;
        let eig = gram.symmetric_eigen();
        let smax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..r)
            .filter(|&j| eig.eigenvalues[j] > smax * 1e-15 && eig.eigenvalues[j] > 0.0)
            .collect();
        let mut u = DMatrix::zeros(n, keep.len());
        let mut s2 = Vec::with_capacity(keep.len());
        for (c, &j) in keep.iter().enumerate() {
            let s = eig.eigenvalues[j].sqrt();
            let w = eig.eigenvectors.column(j);
            let col = (&g * w) / s;
            u.set_column(c, &col);
            s2.push(eig.eigenvalues[j]);
        }
        Ok(KernelBasis {
            points,
            gamma,
            bandwidth: bw,
            u,
            s2,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.s2.len()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        (-self.gamma * sq_dist(a, b)).exp()
    }

    /// Kernel evaluations between `queries` and the training points.
    pub fn cross(&self, queries: &[Vec<f64>]) -> CrossKernel {
        let n = self.points.len();
        let mut data = Vec::with_capacity(queries.len() * n);
        for q in queries {
            data.extend(self.points.iter().map(|p| self.kernel(q, p)));
        }
        CrossKernel {
            rows: queries.len(),
            cols: n,
            data,
        }
    }

    /// Solves `(K + nλI) α = y - offset` for every λ on the grid and keeps
    /// the GCV minimiser.
    pub fn fit(self: &Arc<Self>, ys: &[f64], lambda: &Lambda, intercept: bool) -> Result<KrrModel> {
        let n = self.points.len();
        if ys.len() != n {
            return Err(Error::Argument(format!("{} responses for {n} rows", ys.len())));
        }
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("non-finite response in kernel regression".into()));
        }
        let offset = if intercept { ys.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let yc: Vec<f64> = ys.iter().map(|y| y - offset).collect();
        let ycv = nalgebra::DVector::from_column_slice(&yc);
        let b = self.u.transpose() * &ycv;
        let yy = ycv.norm_squared();
        let nf = n as f64;
        let chosen = match lambda {
            Lambda::Fixed(l) if *l > 0.0 => *l,
            Lambda::Fixed(l) => return Err(Error::Argument(format!("ridge penalty must be positive, got {l}"))),
            Lambda::Gcv(grid) => {
                if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0)) {
                    return Err(Error::Argument("λ grid must be non-empty and positive".into()));
                }
                let mut best = (f64::INFINITY, grid[0]);
                for &l in grid {
                    let nl = nf * l;
                    let mut cb = 0.0;
                    let mut cc = 0.0;
                    let mut df = if intercept { 1.0 } else { 0.0 };
                    for (j, s2) in self.s2.iter().enumerate() {
                        let sh = s2 / (s2 + nl);
                        cb += sh * b[j] * b[j];
                        cc += sh * sh * b[j] * b[j];
                        df += sh;
                    }
                    let rss = (yy - 2.0 * cb + cc).max(0.0);
                    let denom = (nf - df).max(1e-12);
                    let score = nf * rss / (denom * denom);
                    if score < best.0 {
                        best = (score, l);
                    }
                }
                best.1
            }
        };
        let nl = nf * chosen;
        let shrunk = nalgebra::DVector::from_fn(self.s2.len(), |j, _| self.s2[j] / (self.s2[j] + nl) * b[j]);
        let smooth = &self.u * shrunk;
        let alpha: Vec<f64> = (0..n).map(|i| (yc[i] - smooth[i]) / nl).collect();
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("kernel ridge system produced non-finite weights".into()));
        }
        Ok(KrrModel {
            basis: Arc::clone(self),
            alpha,
            offset,
            lambda: chosen,
        })
    }
}

/// Dense query × training kernel matrix, row-major.
#[derive(Debug, Clone)]
pub struct CrossKernel {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CrossKernel {
    pub fn rows(&self) -> usize {
        self.rows
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone)]
pub struct KrrModel {
    basis: Arc<KernelBasis>,
    alpha: Vec<f64>,
    offset: f64,
    lambda: f64,
}

impl KrrModel {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn bandwidth(&self) -> f64 {
        self.basis.bandwidth
    }

    pub fn dual_weights(&self) -> &[f64] {
        &self.alpha
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.offset
            + self
                .basis
                .points
                .iter()
                .zip(&self.alpha)
                .map(|(p, a)| a * self.basis.kernel(x, p))
                .sum::<f64>()
    }

    /// Predictions for the queries of a precomputed cross kernel built from
    /// this model's basis.
    pub fn predict_cross(&self, cross: &CrossKernel) -> Vec<f64> {
        debug_assert_eq!(cross.cols, self.alpha.len());
        (0..cross.rows)
            .map(|i| {
                self.offset
                    + cross
                        .row(i)
                        .iter()
                        .zip(&self.alpha)
                        .map(|(k, a)| k * a)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Fits a single kernel ridge regression of `ys` on `xs`.
pub fn fit_krr(xs: &[Vec<f64>], ys: &[f64], lambda: Lambda, bandwidth: Bandwidth) -> Result<KrrModel> {
    let cfg = KrrConfig {
        lambda,
        bandwidth,
        ..KrrConfig::default()
    };
    fit_krr_with(xs, ys, &cfg)
}

pub fn fit_krr_with(xs: &[Vec<f64>], ys: &[f64], cfg: &KrrConfig) -> Result<KrrModel> {
    let basis = Arc::new(KernelBasis::new(xs.to_vec(), cfg.bandwidth, cfg.tol)?);
    basis.fit(ys, &cfg.lambda, cfg.intercept)
}
