//! Conditional-mean learners and the cross-fitted augmentation functions.
//!
//! `h4*`, `eta4*` and `g_tilde` are ratios of kernel regressions fitted on
//! the union subsample of the training folds. All of them share one kernel
//! basis per fold, so after the first factorization each extra response
//! costs a few matrix-vector products.

pub mod krr;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{DualFrameDataset, FoldPartition, UnitRecord};
use crate::error::{Error, Result};
use crate::sampling_model::{effective_pi_p, fit_pi_bar_on, pi_union, LogisticSamplingModel, MeanLearner, PiBarModel};
use crate::scores::Target;
use krr::{CrossKernel, KernelBasis, KrrConfig};

/// Lower bound applied to every ratio denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Cells with fewer training rows than this trigger the pooled fallback.
pub const MIN_CELL_ROWS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GtildeVariant {
    /// Regression of `y` on `x` over every unit with an observed outcome.
    #[default]
    Mar,
    /// Weighted regression over probability-only units.
    Linkage,
}

/// Inputs to the working-probability learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PiBarInputs {
    #[default]
    X,
    Xy,
}

/// Learner settings shared by every nuisance fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    pub krr: KrrConfig,
    /// Covariate columns treated as binary: fits are done per cell.
    pub binary_columns: Vec<usize>,
    pub gtilde: GtildeVariant,
    pub pi_bar_inputs: PiBarInputs,
    /// Kernel regression for `1/pi_p`; `false` uses the sample mean.
    pub pi_bar_krr: bool,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            krr: KrrConfig::default(),
            binary_columns: Vec::new(),
            gtilde: GtildeVariant::Mar,
            pi_bar_inputs: PiBarInputs::X,
            pi_bar_krr: true,
        }
    }
}

impl NuisanceConfig {
    pub fn pi_bar_learner(&self) -> MeanLearner {
        if self.pi_bar_krr {
            MeanLearner::Krr(self.krr.clone())
        } else {
            MeanLearner::Constant
        }
    }

    pub fn fit_pi_bar(&self, ds: &DualFrameDataset, subset: &[usize]) -> Result<PiBarModel> {
        fit_pi_bar_on(ds, subset, &self.pi_bar_learner(), self.pi_bar_inputs == PiBarInputs::Xy)
    }
}

#[derive(Debug)]
enum CellFit {
    Kernel { basis: Arc<KernelBasis>, cross: CrossKernel },
    /// No continuous columns left in the cell: the cell mean.
    Mean,
}

#[derive(Debug)]
struct Cell {
    train: Vec<usize>,
    query: Vec<usize>,
    fit: CellFit,
}

/// Training covariates, query covariates and the kernel factorizations
/// linking them. Responses are supplied per fit.
#[derive(Debug)]
pub struct Design {
    cells: Vec<Cell>,
    n_train: usize,
    n_query: usize,
    cfg: KrrConfig,
    pooled: bool,
}

fn cell_key(x: &[f64], binary: &[usize]) -> Vec<bool> {
    binary.iter().map(|&c| x[c] > 0.5).collect()
}

fn project(x: &[f64], keep: &[usize]) -> Vec<f64> {
    keep.iter().map(|&c| x[c]).collect()
}

impl Design {
    /// Builds the design. With binary columns, each cell of their joint
    /// values gets its own kernel on the remaining columns; if any training
    /// cell has fewer than [`MIN_CELL_ROWS`] rows, or a query lands in a cell
    /// without training rows, one kernel over all columns is used instead.
    pub fn new(train_x: &[&[f64]], query_x: &[&[f64]], binary: &[usize], cfg: &KrrConfig) -> Result<Self> {
        if train_x.is_empty() {
            return Err(Error::Fit("empty training subsample".into()));
        }
        let dim = train_x[0].len();
        if binary.iter().any(|&c| c >= dim) {
            return Err(Error::Config(format!("binary column index out of range for {dim} covariates")));
        }
        let pooled_cell = |cols: Vec<usize>| -> Result<Cell> {
            Self::cell((0..train_x.len()).collect(), (0..query_x.len()).collect(), train_x, query_x, &cols, cfg)
        };
        if !binary.is_empty() {
            let mut train_cells: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
            for (i, x) in train_x.iter().enumerate() {
                train_cells.entry(cell_key(x, binary)).or_default().push(i);
            }
            let mut query_cells: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
            for (i, x) in query_x.iter().enumerate() {
                query_cells.entry(cell_key(x, binary)).or_default().push(i);
            }
            let small = train_cells.values().any(|v| v.len() < MIN_CELL_ROWS);
            let orphan = query_cells.keys().any(|k| !train_cells.contains_key(k));
            if !small && !orphan {
                let keep: Vec<usize> = (0..dim).filter(|c| !binary.contains(c)).collect();
                let mut cells = Vec::with_capacity(train_cells.len());
                for (key, train) in train_cells {
                    let query = query_cells.remove(&key).unwrap_or_default();
                    cells.push(Self::cell(train, query, train_x, query_x, &keep, cfg)?);
                }
                return Ok(Design {
                    cells,
                    n_train: train_x.len(),
                    n_query: query_x.len(),
                    cfg: cfg.clone(),
                    pooled: false,
                });
            }
            log::debug!("binary cells too small for cell-wise fits; pooling");
        }
        Ok(Design {
            cells: vec![pooled_cell((0..dim).collect())?],
            n_train: train_x.len(),
            n_query: query_x.len(),
            cfg: cfg.clone(),
            pooled: !binary.is_empty(),
        })
    }

    fn cell(
        train: Vec<usize>,
        query: Vec<usize>,
        train_x: &[&[f64]],
        query_x: &[&[f64]],
        keep: &[usize],
        cfg: &KrrConfig,
    ) -> Result<Cell> {
        let fit = if keep.is_empty() || train.len() < 2 {
            CellFit::Mean
        } else {
            let pts: Vec<Vec<f64>> = train.iter().map(|&i| project(train_x[i], keep)).collect();
            let basis = Arc::new(KernelBasis::new(pts, cfg.bandwidth, cfg.tol)?);
            let q: Vec<Vec<f64>> = query.iter().map(|&i| project(query_x[i], keep)).collect();
            let cross = basis.cross(&q);
            CellFit::Kernel { basis, cross }
        };
        Ok(Cell { train, query, fit })
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    /// True when binary cells were requested but the pooled fit was used.
    pub fn pooled_fallback(&self) -> bool {
        self.pooled
    }

    /// Regresses `ys` (one per training row) and predicts at the queries.
    pub fn fit_predict(&self, ys: &[f64]) -> Result<Vec<f64>> {
        if ys.len() != self.n_train {
            return Err(Error::Argument(format!("{} responses for {} training rows", ys.len(), self.n_train)));
        }
        let mut out = vec![0.0; self.n_query];
        for cell in &self.cells {
            let cy: Vec<f64> = cell.train.iter().map(|&i| ys[i]).collect();
            let pred = match &cell.fit {
                CellFit::Kernel { basis, cross } => basis.fit(&cy, &self.cfg.lambda, self.cfg.intercept)?.predict_cross(cross),
                CellFit::Mean => {
                    let m = cy.iter().sum::<f64>() / cy.len().max(1) as f64;
                    vec![m; cell.query.len()]
                }
            };
            for (&q, v) in cell.query.iter().zip(pred) {
                out[q] = v;
            }
        }
        Ok(out)
    }
}

/// Ratio of two predictions with the denominator floored at `floor`;
/// returns the number of floored entries.
pub fn floored_ratio(num: &[f64], den: &[f64], floor: f64) -> (Vec<f64>, usize) {
    let mut floored = 0;
    let vals = num
        .iter()
        .zip(den)
        .map(|(n, d)| {
            if *d < floor {
                floored += 1;
                n / floor
            } else {
                n / d
            }
        })
        .collect();
    (vals, floored)
}

/// Regression-ratio estimate of `E(w z | X) / E(w | X)` for positive
/// weights `w`. The denominator cannot be below the smallest training
/// weight, so that is the floor (never less than [`DENOMINATOR_FLOOR`]);
/// the ratio is a weighted mean of `z` and is clamped to its range.
pub fn weighted_mean_ratio(design: &Design, w: &[f64], z: &[f64], den: &[f64]) -> Result<(Vec<f64>, usize)> {
    let positive = || w.iter().zip(z).filter(|(a, _)| **a > 0.0);
    if positive().next().is_none() {
        return Ok((vec![0.0; design.n_query()], 0));
    }
    let floor = positive().map(|(a, _)| *a).fold(f64::INFINITY, f64::min).max(DENOMINATOR_FLOOR);
    let (lo, hi) = positive().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, v)| (a.min(*v), b.max(*v)));
    let wz: Vec<f64> = w.iter().zip(z).map(|(a, b)| if *a > 0.0 { a * b } else { 0.0 }).collect();
    let (vals, floored) = floored_ratio(&design.fit_predict(&wz)?, den, floor);
    Ok((vals.into_iter().map(|v| v.clamp(lo, hi)).collect(), floored))
}

/// Vector-valued ratio predictions at the queries.
#[derive(Debug, Clone)]
pub struct RatioFit {
    /// One vector per query row.
    pub values: Vec<Vec<f64>>,
    pub floored: usize,
}

/// Per-unit quantities on the union training rows at the current `phi`.
#[derive(Debug, Clone)]
pub struct UnionWeights {
    /// Working union probability.
    pub union: Vec<f64>,
    /// Working `pi_p` (observed or fitted).
    pub p: Vec<f64>,
    /// `O_U / pi_U = (1 - u) / u^2`.
    pub odds_weight: Vec<f64>,
    /// `d pi_np / d phi`.
    pub dpi: Vec<Vec<f64>>,
}

/// Evaluates the working probabilities on `rows` (all in the union).
pub fn union_weights(
    ds: &DualFrameDataset,
    model: &LogisticSamplingModel,
    phi: &[f64],
    rows: &[usize],
    pi_bar: &[f64],
) -> Result<UnionWeights> {
    let recs = ds.records();
    let mut w = UnionWeights {
        union: Vec::with_capacity(rows.len()),
        p: Vec::with_capacity(rows.len()),
        odds_weight: Vec::with_capacity(rows.len()),
        dpi: Vec::with_capacity(rows.len()),
    };
    for (j, &i) in rows.iter().enumerate() {
        let rec = &recs[i];
        let np = model.eval_at(phi, rec)?;
        let p = effective_pi_p(pi_bar[j], rec);
        let u = pi_union(np.pi, p);
        w.union.push(u);
        w.p.push(p);
        w.odds_weight.push((1.0 - u) / (u * u));
        w.dpi.push(np.gradient());
    }
    Ok(w)
}

/// Denominator `E(O_U / pi_U | X, union)` predicted at the queries.
pub fn fit_odds_denominator(design: &Design, w: &UnionWeights) -> Result<Vec<f64>> {
    design.fit_predict(&w.odds_weight)
}

/// `h4*(X)` at a given `theta`: ratio of regressions of `U(theta) O_U/pi_U`
/// and `O_U/pi_U` on the union training rows.
pub fn fit_h4_star(
    ds: &DualFrameDataset,
    target: &dyn Target,
    theta: &[f64],
    design: &Design,
    rows: &[usize],
    w: &UnionWeights,
    den: &[f64],
) -> Result<RatioFit> {
    let recs = ds.records();
    let us: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            let r = &recs[i];
            target.eval(theta, &r.x, r.y.expect("union units carry y"))
        })
        .collect();
    let dim = target.dim();
    let mut cols = Vec::with_capacity(dim);
    let mut floored = 0;
    for c in 0..dim {
        let z: Vec<f64> = us.iter().map(|u| u[c]).collect();
        let (vals, f) = weighted_mean_ratio(design, &w.odds_weight, &z, den)?;
        floored += f;
        cols.push(vals);
    }
    Ok(RatioFit { values: transpose(&cols, design.n_query()), floored })
}

/// `eta4*(X)`: ratio of regressions of `(1 - p) pi_dot / u^2` and
/// `O_U / pi_U` on the union training rows.
pub fn fit_eta4_star(design: &Design, w: &UnionWeights, den: &[f64]) -> Result<RatioFit> {
    let dim = w.dpi.first().map_or(0, |d| d.len());
    let mut cols = Vec::with_capacity(dim);
    let mut floored = 0;
    for c in 0..dim {
        let z: Vec<f64> = (0..w.union.len())
            .map(|j| match w.odds_weight[j] > 0.0 {
                true => (1.0 - w.p[j]) * w.dpi[j][c] / (w.union[j] * w.union[j] * w.odds_weight[j]),
                false => 0.0,
            })
            .collect();
        let (vals, f) = weighted_mean_ratio(design, &w.odds_weight, &z, den)?;
        floored += f;
        cols.push(vals);
    }
    Ok(RatioFit { values: transpose(&cols, design.n_query()), floored })
}

fn transpose(cols: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

/// Outcome surrogate `m(X)` for `g_tilde = U(theta; X, m(X))`.
///
/// `Mar`: `E(Y | X)` over the union training rows. `Linkage`: the
/// `O_P/pi_P`-weighted mean of `Y` given `X` over probability-only training
/// rows, built as a ratio of two regressions.
pub fn fit_gtilde(
    ds: &DualFrameDataset,
    variant: GtildeVariant,
    train: &[usize],
    query: &[usize],
    union_design: Option<&Design>,
    cfg: &NuisanceConfig,
) -> Result<(Vec<f64>, usize)> {
    let recs = ds.records();
    match variant {
        GtildeVariant::Mar => {
            let rows: Vec<usize> = train.iter().copied().filter(|&i| recs[i].y.is_some()).collect();
            let owned;
            let design = match union_design {
                Some(d) => d,
                None => {
                    owned = design_for(ds, &rows, query, cfg)?;
                    &owned
                }
            };
            let ys: Vec<f64> = rows.iter().map(|&i| recs[i].y.unwrap()).collect();
            Ok((design.fit_predict(&ys)?, 0))
        }
        GtildeVariant::Linkage => {
            let rows: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| !recs[i].pattern.delta_np && recs[i].pattern.delta_p)
                .collect();
            if rows.is_empty() {
                return Err(Error::Fit("no probability-only units for the linkage working model".into()));
            }
            let design = design_for(ds, &rows, query, cfg)?;
            let w: Vec<f64> = rows
                .iter()
                .map(|&i| {
                    let p = recs[i].pi_p.unwrap();
                    (1.0 - p) / (p * p)
                })
                .collect();
            let ys: Vec<f64> = rows.iter().map(|&i| recs[i].y.unwrap()).collect();
            weighted_mean_ratio(&design, &w, &ys, &design.fit_predict(&w)?)
        }
    }
}

fn x_rows<'a>(recs: &'a [UnitRecord], idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| recs[i].x.as_slice()).collect()
}

/// Design from training rows to query rows of `ds`.
pub fn design_for(ds: &DualFrameDataset, train: &[usize], query: &[usize], cfg: &NuisanceConfig) -> Result<Design> {
    let recs = ds.records();
    Design::new(&x_rows(recs, train), &x_rows(recs, query), &cfg.binary_columns, &cfg.krr)
}

/// Nuisance state for one fold: learners trained on every other fold and
/// evaluated on the fold's own records.
#[derive(Debug)]
pub struct FoldNuisance {
    pub fold: usize,
    /// Union rows outside the fold.
    pub train_union: Vec<usize>,
    /// Records inside the fold.
    pub query: Vec<usize>,
    pub design: Design,
    pub pi_bar_model: PiBarModel,
    /// Fitted `pi_bar` on `train_union` (NaN where not evaluable).
    pub pi_bar_train: Vec<f64>,
    /// Fitted `pi_bar` on `query`.
    pub pi_bar_query: Vec<f64>,
}

fn predict_pi_bar(model: &PiBarModel, recs: &[UnitRecord], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| model.predict(&recs[i]).unwrap_or(f64::NAN)).collect()
}

impl FoldNuisance {
    /// Trains on records outside `fold`; `fold = None` trains on everything
    /// and evaluates on everything (no cross-fitting).
    pub fn new(ds: &DualFrameDataset, partition: Option<&FoldPartition>, fold: usize, cfg: &NuisanceConfig) -> Result<Self> {
        let recs = ds.records();
        let n = ds.n_total();
        let (train, query): (Vec<usize>, Vec<usize>) = match partition {
            Some(p) => (0..n).partition(|&i| p.fold_of(i) != fold),
            None => ((0..n).collect(), (0..n).collect()),
        };
        let pi_bar_model = cfg.fit_pi_bar(ds, &train)?;
        let train_union: Vec<usize> = train.iter().copied().filter(|&i| recs[i].pattern.in_union()).collect();
        let design = design_for(ds, &train_union, &query, cfg)?;
        Ok(FoldNuisance {
            fold,
            pi_bar_train: predict_pi_bar(&pi_bar_model, recs, &train_union),
            pi_bar_query: predict_pi_bar(&pi_bar_model, recs, &query),
            train_union,
            query,
            design,
            pi_bar_model,
        })
    }

    pub fn weights(&self, ds: &DualFrameDataset, model: &LogisticSamplingModel, phi: &[f64]) -> Result<UnionWeights> {
        union_weights(ds, model, phi, &self.train_union, &self.pi_bar_train)
    }
}

/// Cross-fitted nuisances with the fold bookkeeping needed to check that no
/// record's values came from a learner that saw it.
#[derive(Debug)]
pub struct NuisanceFit {
    pub partition: Option<FoldPartition>,
    pub folds: Vec<FoldNuisance>,
    pub floored: usize,
}

impl NuisanceFit {
    pub fn cross_fitted(ds: &DualFrameDataset, partition: FoldPartition, cfg: &NuisanceConfig) -> Result<Self> {
        let folds = (0..partition.k())
            .map(|k| FoldNuisance::new(ds, Some(&partition), k, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(NuisanceFit { partition: Some(partition), folds, floored: 0 })
    }

    /// Learners trained and evaluated on the full sample.
    pub fn full_sample(ds: &DualFrameDataset, cfg: &NuisanceConfig) -> Result<Self> {
        Ok(NuisanceFit { partition: None, folds: vec![FoldNuisance::new(ds, None, 0, cfg)?], floored: 0 })
    }

    /// Checks the cross-fitting contract: every query record of a fold lies
    /// in that fold and none of its training rows does.
    pub fn verify(&self) -> bool {
        let Some(p) = &self.partition else { return true };
        self.folds.iter().all(|f| {
            f.query.iter().all(|&i| p.fold_of(i) == f.fold) && f.train_union.iter().all(|&i| p.fold_of(i) != f.fold)
        })
    }

    fn scatter<T: Clone>(&self, n: usize, fill: T, mut per_fold: impl FnMut(&FoldNuisance) -> Result<Vec<T>>) -> Result<Vec<T>> {
        let mut out = vec![fill; n];
        for f in &self.folds {
            for (&i, v) in f.query.iter().zip(per_fold(f)?) {
                out[i] = v;
            }
        }
        Ok(out)
    }

    pub fn pi_bar(&self, n: usize) -> Vec<f64> {
        self.scatter(n, f64::NAN, |f| Ok(f.pi_bar_query.clone())).expect("infallible")
    }

    /// Per-fold odds denominators at `phi`, with the union weights.
    pub fn denominators(
        &self,
        ds: &DualFrameDataset,
        model: &LogisticSamplingModel,
        phi: &[f64],
    ) -> Result<Vec<(UnionWeights, Vec<f64>)>> {
        self.folds
            .iter()
            .map(|f| {
                let w = f.weights(ds, model, phi)?;
                let d = fit_odds_denominator(&f.design, &w)?;
                Ok((w, d))
            })
            .collect()
    }

    pub fn eta4(&mut self, n: usize, dens: &[(UnionWeights, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
        let mut floored = 0;
        let mut out = vec![Vec::new(); n];
        for (f, (w, d)) in self.folds.iter().zip(dens) {
            let fit = fit_eta4_star(&f.design, w, d)?;
            floored += fit.floored;
            for (&i, v) in f.query.iter().zip(fit.values) {
                out[i] = v;
            }
        }
        self.floored += floored;
        Ok(out)
    }

    pub fn h4(
        &mut self,
        ds: &DualFrameDataset,
        target: &dyn Target,
        theta: &[f64],
        dens: &[(UnionWeights, Vec<f64>)],
    ) -> Result<Vec<Vec<f64>>> {
        let mut floored = 0;
        let mut out = vec![Vec::new(); ds.n_total()];
        for (f, (w, d)) in self.folds.iter().zip(dens) {
            let fit = fit_h4_star(ds, target, theta, &f.design, &f.train_union, w, d)?;
            floored += fit.floored;
            for (&i, v) in f.query.iter().zip(fit.values) {
                out[i] = v;
            }
        }
        self.floored += floored;
        Ok(out)
    }

    pub fn gtilde(&mut self, ds: &DualFrameDataset, cfg: &NuisanceConfig, variant: GtildeVariant) -> Result<Vec<f64>> {
        let mut floored = 0;
        let out = self.scatter(ds.n_total(), f64::NAN, |f| {
            let train: Vec<usize> = match &self.partition {
                Some(p) => (0..ds.n_total()).filter(|&i| p.fold_of(i) != f.fold).collect(),
                None => (0..ds.n_total()).collect(),
            };
            let design = (variant == GtildeVariant::Mar).then_some(&f.design);
            let (v, fl) = fit_gtilde(ds, variant, &train, &f.query, design, cfg)?;
            floored += fl;
            Ok(v)
        });
        let out = out?;
        self.floored += floored;
        Ok(out)
    }
}
