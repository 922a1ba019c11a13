//! Observed dual-frame data: one record per population unit.
//!
//! A unit's observed fields depend on its sampling pattern `(delta_np, delta_p)`:
//!
//! | pattern | x | y | pi_p |
//! |---------|---|---|------|
//! | (1,1)   | ✓ | ✓ | ✓    |
//! | (1,0)   | ✓ | ✓ |      |
//! | (0,1)   | ✓ | ✓ | ✓    |
//! | (0,0)   | ✓ |   |      |
//!
//! Unsampled units must be present as rows carrying covariates only, since
//! every estimator sums over the whole finite population.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sampling indicators of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pattern {
    pub delta_np: bool,
    pub delta_p: bool,
}

impl Pattern {
    pub const BOTH: Pattern = Pattern::new(true, true);
    pub const NP_ONLY: Pattern = Pattern::new(true, false);
    pub const P_ONLY: Pattern = Pattern::new(false, true);
    pub const NEITHER: Pattern = Pattern::new(false, false);

    pub const fn new(delta_np: bool, delta_p: bool) -> Self {
        Pattern { delta_np, delta_p }
    }

    /// Membership in at least one of the two samples.
    pub fn in_union(self) -> bool {
        self.delta_np || self.delta_p
    }

    pub fn np(self) -> f64 {
        f64::from(u8::from(self.delta_np))
    }

    pub fn p(self) -> f64 {
        f64::from(u8::from(self.delta_p))
    }

    pub fn union(self) -> f64 {
        f64::from(u8::from(self.in_union()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: u64,
    pub pattern: Pattern,
    pub x: Vec<f64>,
    pub y: Option<f64>,
    pub pi_p: Option<f64>,
}

impl UnitRecord {
    /// Reasons this record breaks the observed-data layout, if any.
    fn violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.pattern.in_union() != self.y.is_some() {
            out.push(if self.y.is_some() {
                "y present on an unsampled unit"
            } else {
                "y missing on a sampled unit"
            });
        }
        if self.pattern.delta_p != self.pi_p.is_some() {
            out.push(if self.pi_p.is_some() {
                "pi_p present outside the probability sample"
            } else {
                "pi_p missing on a probability-sample unit"
            });
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            out.push("non-finite covariate");
        }
        if self.y.is_some_and(|v| !v.is_finite()) {
            out.push("non-finite outcome");
        }
        if let Some(p) = self.pi_p {
            if !(p > 0.0 && p <= 1.0) {
                out.push("pi_p outside (0, 1]");
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualFrameDataset {
    records: Vec<UnitRecord>,
    covariate_names: Vec<String>,
}

impl DualFrameDataset {
    /// Builds a dataset, rejecting any record that violates the pattern layout.
    pub fn new(records: Vec<UnitRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let p = covariate_names.len();
        let mut seen = HashSet::with_capacity(records.len());
        let mut dup = Vec::new();
        let mut bad = Vec::new();
        let mut reasons: Vec<&'static str> = Vec::new();
        for r in &records {
            if !seen.insert(r.id) {
                dup.push(r.id);
            }
            let mut v = r.violations();
            if r.x.len() != p {
                v.push("covariate count differs from header");
            }
            if !v.is_empty() {
                bad.push(r.id);
                for reason in v {
                    if !reasons.contains(&reason) {
                        reasons.push(reason);
                    }
                }
            }
        }
        if !dup.is_empty() {
            return Err(Error::Validation {
                ids: dup,
                message: "duplicate ids".into(),
            });
        }
        if !bad.is_empty() {
            return Err(Error::Validation {
                ids: bad,
                message: reasons.join("; "),
            });
        }
        if !records.iter().any(|r| r.pattern.delta_p) {
            return Err(Error::Validation {
                ids: Vec::new(),
                message: "no probability-sample units".into(),
            });
        }
        if !records.iter().any(|r| r.pattern.delta_np) {
            return Err(Error::Validation {
                ids: Vec::new(),
                message: "no non-probability-sample units".into(),
            });
        }
        Ok(DualFrameDataset {
            records,
            covariate_names,
        })
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    /// Population size N.
    pub fn n_total(&self) -> usize {
        self.records.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn count(&self, pattern: Pattern) -> usize {
        self.records.iter().filter(|r| r.pattern == pattern).count()
    }

    pub fn n_np(&self) -> usize {
        self.records.iter().filter(|r| r.pattern.delta_np).count()
    }

    pub fn n_p(&self) -> usize {
        self.records.iter().filter(|r| r.pattern.delta_p).count()
    }

    /// Drops record linkage: each overlap unit becomes an NP-only record and a
    /// separate P-only record, as when the two files cannot be matched.
    pub fn relabel_unlinked(&self) -> DualFrameDataset {
        let mut next_id = self.records.iter().map(|r| r.id).max().unwrap_or(0) + 1;
        let mut out = Vec::with_capacity(self.records.len() + self.count(Pattern::BOTH));
        for r in &self.records {
            if r.pattern == Pattern::BOTH {
                out.push(UnitRecord {
                    pattern: Pattern::NP_ONLY,
                    pi_p: None,
                    ..r.clone()
                });
                out.push(UnitRecord {
                    id: next_id,
                    pattern: Pattern::P_ONLY,
                    ..r.clone()
                });
                next_id += 1;
            } else {
                out.push(r.clone());
            }
        }
        DualFrameDataset {
            records: out,
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Column names used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub id: String,
    pub delta_np: String,
    pub delta_p: String,
    pub pi_p: String,
    pub y: String,
    /// Covariate columns; `None` takes every remaining column in header order.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            id: "id".into(),
            delta_np: "delta_np".into(),
            delta_p: "delta_p".into(),
            pi_p: "pi_p".into(),
            y: "y".into(),
            covariates: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<DualFrameDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

fn column(headers: &[String], name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
        line: 1,
        message: format!("missing column `{name}`"),
    })
}

fn parse_indicator(raw: &str, line: usize, name: &str) -> Result<bool> {
    match raw.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::Parse {
            line,
            message: format!("`{name}` must be 0 or 1, got `{other}`"),
        }),
    }
}

fn parse_opt(raw: &str, line: usize, name: &str) -> Result<Option<f64>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("`{name}` is not a number: `{raw}`"),
    })
}

pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<DualFrameDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let id_col = column(&headers, &schema.id)?;
    let np_col = column(&headers, &schema.delta_np)?;
    let p_col = column(&headers, &schema.delta_p)?;
    let pi_col = column(&headers, &schema.pi_p)?;
    let y_col = column(&headers, &schema.y)?;
    let reserved = [id_col, np_col, p_col, pi_col, y_col];
    let cov_names: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !reserved.contains(i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_cols = cov_names
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id = field(id_col).trim().parse::<u64>().map_err(|_| Error::Parse {
            line,
            message: format!("`{}` is not a non-negative integer", schema.id),
        })?;
        let pattern = Pattern::new(
            parse_indicator(field(np_col), line, &schema.delta_np)?,
            parse_indicator(field(p_col), line, &schema.delta_p)?,
        );
        let pi_p = parse_opt(field(pi_col), line, &schema.pi_p)?;
        if let Some(p) = pi_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Domain {
                    line,
                    message: format!("pi_p = {p} is not a probability in (0, 1]"),
                });
            }
        }
        let y = parse_opt(field(y_col), line, &schema.y)?;
        let x = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, name)| {
                parse_opt(field(c), line, name)?.ok_or_else(|| Error::Parse {
                    line,
                    message: format!("covariate `{name}` is empty"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(UnitRecord {
            id,
            pattern,
            x,
            y,
            pi_p,
        });
    }
    DualFrameDataset::new(records, cov_names)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the canonical `id,delta_np,delta_p,pi_p,y,<covariates>` layout.
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_csv<W: Write>(ds: &DualFrameDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Io {
        path: "<csv writer>".into(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut header = vec![
        "id".to_string(),
        "delta_np".into(),
        "delta_p".into(),
        "pi_p".into(),
        "y".into(),
    ];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header).map_err(to_err)?;
    for r in &ds.records {
        let mut row = vec![
            r.id.to_string(),
            u8::from(r.pattern.delta_np).to_string(),
            u8::from(r.pattern.delta_p).to_string(),
            fmt_opt(r.pi_p),
            fmt_opt(r.y),
        ];
        row.extend(r.x.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })
}

pub fn save_csv(ds: &DualFrameDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_csv(ds, std::io::BufWriter::new(file))
}

/// Fold membership for cross-fitting. Folds are numbered `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPartition {
    assignments: Vec<usize>,
    k: usize,
}

impl FoldPartition {
    /// Partition from explicit labels; every fold in `0..k` must be non-empty.
    pub fn from_assignments(assignments: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Argument(format!("fold count must be at least 2, got {k}")));
        }
        let mut seen = vec![false; k];
        for &f in &assignments {
            if f >= k {
                return Err(Error::Argument(format!("fold label {f} out of range for {k} folds")));
            }
            seen[f] = true;
        }
        if seen.contains(&false) {
            return Err(Error::Argument("every fold needs at least one record".into()));
        }
        Ok(FoldPartition { assignments, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn fold_of(&self, index: usize) -> usize {
        self.assignments[index]
    }

    /// Record positions belonging to `fold`.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignments {
            s[f] += 1;
        }
        s
    }
}

/// Uniformly random balanced partition of `n` positions into `k` folds.
pub fn split_indices(n: usize, k: usize, seed: u64) -> Result<FoldPartition> {
    if k < 2 {
        return Err(Error::Argument(format!("fold count must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Argument(format!("fold count {k} exceeds {n} records")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(FoldPartition { assignments, k })
}

pub fn split_folds(ds: &DualFrameDataset, k: usize, seed: u64) -> Result<FoldPartition> {
    split_indices(ds.n_total(), k, seed)
}
