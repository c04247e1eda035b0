//! Core data types and the text formats used to move them between tools.
//!
//! Sparse feature file:
//!
//! ```text
//! # comment lines start with '#'
//! dim=<D> n=<N>
//! <id> <label> <idx_1> ... <idx_k>
//! ```
//!
//! Indices are strictly ascending and `< D`. Labels are `0` or `1`.
//!
//! Prediction CSV: header `id,prob,logit,label` (or `prob,logit,label` when
//! the set carries no ids), values written with 17 significant digits so a
//! reload reproduces `f64` values bit for bit.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{logit, sigmoid, Scalar};

/// Set-bit indices of one binary fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparseBinaryVector {
    dim: usize,
    indices: Vec<u32>,
}

impl SparseBinaryVector {
    pub fn new(dim: usize, indices: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidData("dimension must be positive".into()));
        }
        if dim > u32::MAX as usize + 1 {
            return Err(Error::InvalidData(format!("dimension {dim} too large")));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidData(format!(
                    "indices not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= dim {
                return Err(Error::InvalidData(format!(
                    "index {last} out of range for dim {dim}"
                )));
            }
        }
        Ok(Self { dim, indices })
    }

    /// Builds a vector from unsorted, possibly repeated indices.
    pub fn from_unsorted(dim: usize, mut indices: Vec<u32>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(dim, indices)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Fingerprints with binary activity labels, compound ids and an optional
/// fold assignment. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    vectors: Vec<SparseBinaryVector>,
    labels: Vec<u8>,
    ids: Vec<String>,
    folds: Option<Vec<u8>>,
}

impl LabeledDataset {
    /// Validates and assembles a dataset. Rejects single-class label sets.
    pub fn new(
        dim: usize,
        vectors: Vec<SparseBinaryVector>,
        labels: Vec<u8>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let n = vectors.len();
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: labels.len(),
            });
        }
        if ids.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: ids.len(),
            });
        }
        if n == 0 {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        for v in &vectors {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidData(format!("label {bad} not in {{0,1}}")));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == ',') {
                return Err(Error::InvalidData(format!("invalid compound id {id:?}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate compound id {id}")));
            }
        }
        let positives = labels.iter().filter(|&&y| y == 1).count();
        if positives == 0 || positives == n {
            return Err(Error::SingleClass("dataset".into()));
        }
        Ok(Self {
            dim,
            vectors,
            labels,
            ids,
            folds: None,
        })
    }

    /// Returns a copy carrying the given fold labels (each in `0..5`).
    pub fn with_folds(mut self, folds: Vec<u8>) -> Result<Self> {
        if folds.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: folds.len(),
            });
        }
        if let Some(f) = folds.iter().find(|&&f| f > 4) {
            return Err(Error::InvalidData(format!("fold {f} not in 0..=4")));
        }
        self.folds = Some(folds);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[SparseBinaryVector] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &SparseBinaryVector {
        &self.vectors[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn folds(&self) -> Option<&[u8]> {
        self.folds.as_deref()
    }

    pub fn active_ratio(&self) -> f64 {
        self.labels.iter().map(|&y| f64::from(y)).sum::<f64>() / self.len() as f64
    }

    /// Labels of a subset, in index order.
    pub fn labels_of(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn ids_of(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.ids[i].clone()).collect()
    }
}

/// Index partition of a dataset into training, validation and test parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Checks disjointness, coverage of `0..n`, and that every part holds
    /// both classes.
    pub fn validate(&self, ds: &LabeledDataset) -> Result<()> {
        let n = ds.len();
        let mut seen = vec![false; n];
        for part in [&self.train, &self.validation, &self.test] {
            for &i in part {
                if i >= n {
                    return Err(Error::InvalidData(format!("split index {i} >= {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidData(format!("index {i} in two partitions")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidData("split does not cover the dataset".into()));
        }
        for (name, part) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            check_two_classes(ds, part, name)?;
        }
        Ok(())
    }
}

pub(crate) fn check_two_classes(ds: &LabeledDataset, part: &[usize], name: &str) -> Result<()> {
    if part.is_empty() {
        return Err(Error::InvalidData(format!("{name} partition is empty")));
    }
    let pos = part.iter().filter(|&&i| ds.label(i) == 1).count();
    if pos == 0 || pos == part.len() {
        return Err(Error::SingleClass(format!("{name} partition")));
    }
    Ok(())
}

/// Per-sample probabilities and logits with their ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet<T> {
    ids: Option<Vec<String>>,
    probs: Vec<T>,
    logits: Vec<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> PredictionSet<T> {
    /// Validates the logistic consistency between `probs` and `logits`.
    pub fn new(probs: Vec<T>, logits: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        if probs.len() != logits.len() {
            return Err(Error::LengthMismatch {
                left: probs.len(),
                right: logits.len(),
            });
        }
        if probs.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: probs.len(),
                right: labels.len(),
            });
        }
        let tol = T::consistency_tol();
        for (i, (&p, &z)) in probs.iter().zip(&logits).enumerate() {
            if !(p >= T::zero() && p <= T::one()) {
                return Err(Error::InvalidData(format!("prob {p} at row {i} outside [0,1]")));
            }
            if !z.is_finite() {
                return Err(Error::InvalidData(format!("non-finite logit at row {i}")));
            }
            if (sigmoid(z) - p).abs() > tol {
                return Err(Error::InvalidData(format!(
                    "logit {z} inconsistent with prob {p} at row {i}"
                )));
            }
        }
        if let Some(y) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidData(format!("label {y} not in {{0,1}}")));
        }
        Ok(Self {
            ids: None,
            probs,
            logits,
            labels,
        })
    }

    /// Probabilities are the logistic transform of the given logits.
    pub fn from_logits(logits: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Self::new(probs, logits, labels)
    }

    /// Logits are recovered from probabilities (saturated values are clamped
    /// to the nearest finite logit).
    pub fn from_probs(probs: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        let logits = probs.iter().map(|&p| logit(p)).collect();
        Self::new(probs, logits, labels)
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: ids.len(),
            });
        }
        if let Some(bad) = ids
            .iter()
            .find(|id| id.is_empty() || id.contains(',') || id.contains('\n'))
        {
            return Err(Error::InvalidData(format!("invalid id {bad:?}")));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn base_rate(&self) -> T {
        T::of_usize(self.positives()) / T::of_usize(self.len())
    }

    /// Subset in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: self
                .ids
                .as_ref()
                .map(|ids| rows.iter().map(|&i| ids[i].clone()).collect()),
            probs: rows.iter().map(|&i| self.probs[i]).collect(),
            logits: rows.iter().map(|&i| self.logits[i]).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads and validates a sparse feature file.
pub fn load_sparse_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    parse_sparse_dataset(&read_text(path)?, &path.display().to_string())
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut dim = None;
    let mut n = None;
    for tok in line.split_whitespace() {
        let (key, value) = tok.split_once('=')?;
        let value: usize = value.parse().ok()?;
        match key {
            "dim" if dim.is_none() => dim = Some(value),
            "n" if n.is_none() => n = Some(value),
            _ => return None,
        }
    }
    Some((dim?, n?))
}

/// Parses the sparse feature format from a string. `origin` labels errors.
pub fn parse_sparse_dataset(text: &str, origin: &str) -> Result<LabeledDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| err(0, "missing header".into()))?;
    let (dim, n) = parse_header(header)
        .ok_or_else(|| err(hline, format!("malformed header {header:?}, expected `dim=<D> n=<N>`")))?;
    if dim == 0 || dim > u32::MAX as usize + 1 {
        return Err(err(hline, format!("invalid dim {dim}")));
    }

    let mut vectors = Vec::with_capacity(n.min(1 << 20));
    let mut labels = Vec::with_capacity(n.min(1 << 20));
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    for (lineno, line) in lines {
        if ids.len() == n {
            return Err(err(lineno, format!("more than the declared {n} rows")));
        }
        let mut toks = line.split_whitespace();
        let id = toks.next().ok_or_else(|| err(lineno, "missing id".into()))?;
        let label = match toks.next() {
            Some("0") => 0u8,
            Some("1") => 1u8,
            other => return Err(err(lineno, format!("bad label {other:?}"))),
        };
        let mut indices = Vec::new();
        for tok in toks {
            let idx: u64 = tok
                .parse()
                .map_err(|_| err(lineno, format!("bad index {tok:?}")))?;
            if idx >= dim as u64 {
                return Err(err(lineno, format!("index {idx} out of range for dim {dim}")));
            }
            indices.push(idx as u32);
        }
        let v = SparseBinaryVector::new(dim, indices).map_err(|e| err(lineno, e.to_string()))?;
        vectors.push(v);
        labels.push(label);
        ids.push(id.to_string());
    }
    if ids.len() != n {
        return Err(err(0, format!("declared {n} rows, found {}", ids.len())));
    }
    LabeledDataset::new(dim, vectors, labels, ids)
}

/// Serializes a dataset in the sparse feature format.
pub fn format_sparse_dataset(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "dim={} n={}", ds.dim(), ds.len());
    for i in 0..ds.len() {
        let _ = write!(out, "{} {}", ds.ids[i], ds.labels[i]);
        for idx in ds.vectors[i].indices() {
            let _ = write!(out, " {idx}");
        }
        out.push('\n');
    }
    out
}

pub fn save_sparse_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_sparse_dataset(ds))
}

/// Writes `<id> <fold>` lines.
pub fn save_folds(ids: &[String], folds: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (id, f) in ids.iter().zip(folds) {
        let _ = writeln!(out, "{id} {f}");
    }
    write_text(path.as_ref(), &out)
}

/// Reads a fold file and attaches it to `ds`, matching rows by compound id.
pub fn attach_folds(ds: LabeledDataset, path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let origin = path.display().to_string();
    let index: std::collections::HashMap<&str, usize> = ds
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut folds = vec![None; ds.len()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.clone(),
            line: lineno + 1,
            msg,
        };
        let mut toks = line.split_whitespace();
        let (Some(id), Some(f), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(err("expected `<id> <fold>`".into()));
        };
        let f: u8 = f.parse().map_err(|_| err(format!("bad fold {f:?}")))?;
        let &row = index
            .get(id)
            .ok_or_else(|| err(format!("unknown id {id}")))?;
        if folds[row].replace(f).is_some() {
            return Err(err(format!("duplicate id {id}")));
        }
    }
    let folds = folds
        .into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| Error::InvalidData(format!("no fold for {}", ds.ids()[i]))))
        .collect::<Result<Vec<_>>>()?;
    ds.with_folds(folds)
}

/// CSV text of a prediction set.
pub fn format_predictions<T: Scalar>(preds: &PredictionSet<T>) -> String {
    let mut out = String::new();
    match preds.ids() {
        Some(_) => out.push_str("id,prob,logit,label\n"),
        None => out.push_str("prob,logit,label\n"),
    }
    for i in 0..preds.len() {
        if let Some(ids) = preds.ids() {
            let _ = write!(out, "{},", ids[i]);
        }
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{}",
            preds.probs[i].f64(),
            preds.logits[i].f64(),
            preds.labels[i]
        );
    }
    out
}

pub fn save_predictions<T: Scalar>(preds: &PredictionSet<T>, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_predictions(preds))
}

pub fn parse_predictions<T: Scalar>(text: &str, origin: &str) -> Result<PredictionSet<T>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let with_ids = match lines.next().map(|(_, l)| l.trim()) {
        Some("id,prob,logit,label") => true,
        Some("prob,logit,label") => false,
        other => return Err(err(1, format!("unexpected header {other:?}"))),
    };
    let (mut ids, mut probs, mut logits, mut labels) = (vec![], vec![], vec![], vec![]);
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let expected = if with_ids { 4 } else { 3 };
        if cols.len() != expected {
            return Err(err(i + 1, format!("expected {expected} columns")));
        }
        let off = usize::from(with_ids);
        if with_ids {
            ids.push(cols[0].to_string());
        }
        let num = |s: &str| -> Result<T> {
            let v: f64 = s.parse().map_err(|_| err(i + 1, format!("bad number {s:?}")))?;
            Ok(T::of(v))
        };
        probs.push(num(cols[off])?);
        logits.push(num(cols[off + 1])?);
        labels.push(match cols[off + 2] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(i + 1, format!("bad label {other:?}"))),
        });
    }
    let set = PredictionSet::new(probs, logits, labels)?;
    if with_ids {
        set.with_ids(ids)
    } else {
        Ok(set)
    }
}

pub fn load_predictions<T: Scalar>(path: impl AsRef<Path>) -> Result<PredictionSet<T>> {
    let path = path.as_ref();
    parse_predictions(&read_text(path)?, &path.display().to_string())
}
