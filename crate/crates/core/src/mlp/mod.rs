//! Two-layer perceptron over sparse binary inputs:
//! `logit = w2 · dropout(relu(W1 x + b1)) + b2`.
//!
//! `W1` is stored column-major (one contiguous `hidden`-long column per input
//! feature) so `W1 x` is a sum of the columns at the set bits.

mod checkpoint;
mod train;

pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC};
pub use train::{train, TrainingTrace};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, PredictionSet, SparseBinaryVector};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHyperparams {
    pub hidden_size: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpHyperparams {
    fn default() -> Self {
        Self {
            hidden_size: 256,
            dropout_rate: 0.2,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 200,
            patience: 10,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl MlpHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.hidden_size == 0 {
            return bad("hidden_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return bad("max_epochs, patience and batch_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    dim: usize,
    hidden: usize,
    /// `dim` columns of length `hidden`.
    pub(crate) w1: Vec<T>,
    pub(crate) b1: Vec<T>,
    pub(crate) w2: Vec<T>,
    pub(crate) b2: T,
    hp: MlpHyperparams,
}

/// Gradient with the same layout as [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
}

impl<T: Scalar> MlpGradient<T> {
    fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: vec![T::zero(); dim * hidden],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); hidden],
            b2: T::zero(),
        }
    }

    pub fn norm(&self) -> T {
        let sq = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>();
        (sq(&self.w1) + sq(&self.b1) + sq(&self.w2) + self.b2 * self.b2).sqrt()
    }
}

impl<T: Scalar> MlpModel<T> {
    /// Zero-initialized model.
    pub fn zeros(dim: usize, hp: MlpHyperparams) -> Result<Self> {
        hp.validate()?;
        if dim == 0 {
            return Err(Error::InvalidParameter("input dimension must be positive".into()));
        }
        let h = hp.hidden_size;
        Ok(Self {
            dim,
            hidden: h,
            w1: vec![T::zero(); dim * h],
            b1: vec![T::zero(); h],
            w2: vec![T::zero(); h],
            b2: T::zero(),
            hp,
        })
    }

    /// Uniform He-style fan-in initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for both weight matrices and zero biases.
    pub fn init(dim: usize, hp: MlpHyperparams, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(dim, hp)?;
        let a1 = (6.0 / dim as f64).sqrt();
        for w in &mut m.w1 {
            *w = T::of(rng.random_range(-a1..a1));
        }
        let a2 = (6.0 / m.hidden as f64).sqrt();
        for w in &mut m.w2 {
            *w = T::of(rng.random_range(-a2..a2));
        }
        Ok(m)
    }

    /// Builds a model from explicit weights. `w1` is given row-major as
    /// `hidden` rows of length `dim`.
    pub fn from_weights(
        dim: usize,
        w1_rows: &[Vec<T>],
        b1: Vec<T>,
        w2: Vec<T>,
        b2: T,
        hp: MlpHyperparams,
    ) -> Result<Self> {
        let h = b1.len();
        if w1_rows.len() != h || w2.len() != h || hp.hidden_size != h {
            return Err(Error::InvalidParameter("inconsistent hidden size".into()));
        }
        let mut m = Self::zeros(dim, hp)?;
        for (r, row) in w1_rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            for (j, &w) in row.iter().enumerate() {
                m.w1[j * h + r] = w;
            }
        }
        m.b1 = b1;
        m.w2 = w2;
        m.b2 = b2;
        m.check_finite()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn hyperparams(&self) -> &MlpHyperparams {
        &self.hp
    }

    pub fn output_weights(&self) -> (&[T], T) {
        (&self.w2, self.b2)
    }

    pub fn hidden_biases(&self) -> &[T] {
        &self.b1
    }

    /// Column of `W1` for input feature `j`.
    pub fn input_column(&self, j: usize) -> &[T] {
        &self.w1[j * self.hidden..(j + 1) * self.hidden]
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).all(|w| w.is_finite()) && self.b2.is_finite()
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidData("model has non-finite weights".into()))
        }
    }

    fn check_dim(&self, x: &SparseBinaryVector) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.dim(),
            });
        }
        Ok(())
    }

    /// `W1 x + b1`.
    fn pre_activation(&self, x: &SparseBinaryVector, out: &mut [T]) {
        out.copy_from_slice(&self.b1);
        for &j in x.indices() {
            let col = self.input_column(j as usize);
            for (o, &w) in out.iter_mut().zip(col) {
                *o = *o + w;
            }
        }
    }

    /// `relu(W1 x + b1)`, without dropout.
    pub fn hidden_activations(&self, x: &SparseBinaryVector) -> Result<Vec<T>> {
        self.check_dim(x)?;
        let mut h = vec![T::zero(); self.hidden];
        self.pre_activation(x, &mut h);
        for v in &mut h {
            *v = v.max(T::zero());
        }
        Ok(h)
    }

    /// Output logit. With a mask, dropped units are zeroed and kept ones are
    /// scaled by `1 / (1 - p)`; without one the pass is deterministic.
    pub fn forward_logit(&self, x: &SparseBinaryVector, mask: Option<&[bool]>) -> Result<T> {
        if let Some(m) = mask {
            if m.len() != self.hidden {
                return Err(Error::DimensionMismatch {
                    expected: self.hidden,
                    found: m.len(),
                });
            }
        }
        let h = self.hidden_activations(x)?;
        Ok(self.head(&h, mask))
    }

    fn head(&self, h: &[T], mask: Option<&[bool]>) -> T {
        match mask {
            None => self.b2 + h.iter().zip(&self.w2).map(|(&a, &w)| a * w).sum::<T>(),
            Some(mask) => {
                let scale = T::one() / (T::one() - T::of(self.hp.dropout_rate));
                let s: T = h
                    .iter()
                    .zip(&self.w2)
                    .zip(mask)
                    .filter(|(_, &keep)| keep)
                    .map(|((&a, &w), _)| a * w)
                    .sum();
                self.b2 + s * scale
            }
        }
    }

    pub fn predict_proba(&self, x: &SparseBinaryVector) -> Result<T> {
        Ok(sigmoid(self.forward_logit(x, None)?))
    }

    /// Deterministic predictions for a subset of a dataset.
    pub fn predict(&self, ds: &LabeledDataset, indices: &[usize]) -> Result<PredictionSet<T>> {
        let logits = indices
            .iter()
            .map(|&i| self.forward_logit(ds.vector(i), None))
            .collect::<Result<Vec<_>>>()?;
        PredictionSet::from_logits(logits, ds.labels_of(indices))?.with_ids(ds.ids_of(indices))
    }

    /// Draws a dropout mask (`true` = keep) for this model's rate.
    pub fn sample_mask(&self, rng: &mut Rng) -> Vec<bool> {
        let keep = 1.0 - self.hp.dropout_rate;
        (0..self.hidden).map(|_| rng.random::<f64>() < keep).collect()
    }

    /// Sum over the batch of per-sample BCE gradients (no decay, not yet
    /// divided by the batch size). Returns the summed loss.
    fn accumulate_bce(
        &self,
        ds: &LabeledDataset,
        batch: &[usize],
        masks: Option<&[Vec<bool>]>,
        grad: &mut MlpGradient<T>,
        touched: &mut Vec<u32>,
    ) -> T {
        let h = self.hidden;
        let scale = T::one() / (T::one() - T::of(self.hp.dropout_rate));
        let mut pre = vec![T::zero(); h];
        let mut act = vec![T::zero(); h];
        let mut loss = T::zero();
        for (k, &i) in batch.iter().enumerate() {
            let x = ds.vector(i);
            self.pre_activation(x, &mut pre);
            let mask = masks.map(|m| m[k].as_slice());
            for u in 0..h {
                let r = pre[u].max(T::zero());
                act[u] = match mask {
                    None => r,
                    Some(m) if m[u] => r * scale,
                    Some(_) => T::zero(),
                };
            }
            let z = self.b2 + act.iter().zip(&self.w2).map(|(&a, &w)| a * w).sum::<T>();
            let y = T::of(f64::from(ds.label(i)));
            loss = loss + softplus(z) - y * z;
            let dz = sigmoid(z) - y;
            grad.b2 = grad.b2 + dz;
            for u in 0..h {
                grad.w2[u] = grad.w2[u] + dz * act[u];
                // d act / d pre: relu'(pre) times the mask scale
                let gate = match mask {
                    _ if pre[u] <= T::zero() => T::zero(),
                    None => T::one(),
                    Some(m) if m[u] => scale,
                    Some(_) => T::zero(),
                };
                pre[u] = dz * self.w2[u] * gate;
            }
            for u in 0..h {
                grad.b1[u] = grad.b1[u] + pre[u];
            }
            for &j in x.indices() {
                let col = &mut grad.w1[j as usize * h..(j as usize + 1) * h];
                for (g, &d) in col.iter_mut().zip(&pre) {
                    *g = *g + d;
                }
                touched.push(j);
            }
        }
        loss
    }

    /// Exact gradient of the mean BCE over `batch` (with the given dropout
    /// masks held fixed), plus `weight_decay * W` on `W1` and `w2`. Biases
    /// carry no decay.
    pub fn bce_gradient(
        &self,
        ds: &LabeledDataset,
        batch: &[usize],
        masks: Option<&[Vec<bool>]>,
    ) -> Result<MlpGradient<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        if ds.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: ds.dim(),
            });
        }
        if let Some(m) = masks {
            if m.len() != batch.len() || m.iter().any(|v| v.len() != self.hidden) {
                return Err(Error::InvalidParameter("mask shape does not match batch".into()));
            }
        }
        let mut g = MlpGradient::zeros(self.dim, self.hidden);
        let mut touched = Vec::new();
        self.accumulate_bce(ds, batch, masks, &mut g, &mut touched);
        let inv = T::one() / T::of_usize(batch.len());
        let wd = T::of(self.hp.weight_decay);
        for (g, &w) in g.w1.iter_mut().zip(&self.w1) {
            *g = *g * inv + wd * w;
        }
        for (g, &w) in g.w2.iter_mut().zip(&self.w2) {
            *g = *g * inv + wd * w;
        }
        for g in &mut g.b1 {
            *g = *g * inv;
        }
        g.b2 = g.b2 * inv;
        Ok(g)
    }

    /// Mean BCE over `batch` with fixed masks, computed from the logits
    /// without clamping.
    pub fn batch_loss(
        &self,
        ds: &LabeledDataset,
        batch: &[usize],
        masks: Option<&[Vec<bool>]>,
    ) -> Result<T> {
        let mut sum = T::zero();
        for (k, &i) in batch.iter().enumerate() {
            let z = self.forward_logit(ds.vector(i), masks.map(|m| m[k].as_slice()))?;
            let y = T::of(f64::from(ds.label(i)));
            sum = sum + softplus(z) - y * z;
        }
        Ok(sum / T::of_usize(batch.len()))
    }

    /// Mutable views of every parameter, in the order W1, b1, w2, b2.
    pub fn params_mut(&mut self) -> [&mut [T]; 4] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }

    /// Euclidean distance between the parameters of two same-shaped models.
    pub fn distance(&self, other: &Self) -> T {
        let d = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
        (d(&self.w1, &other.w1) + d(&self.b1, &other.b1) + d(&self.w2, &other.w2)
            + (self.b2 - other.b2) * (self.b2 - other.b2))
            .sqrt()
    }
}
