use rand::seq::SliceRandom;

use super::{MlpGradient, MlpHyperparams, MlpModel};
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::bce_loss;
use crate::scalar::Scalar;
use crate::seed;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    /// Mean training BCE per epoch (with dropout active).
    pub train_loss: Vec<f64>,
    /// Validation BCE per epoch (deterministic forward pass).
    pub val_loss: Vec<f64>,
    /// Zero-based epoch of the returned model.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    /// One AdamW step on `params`: adaptive update from `grad`, then
    /// `params -= lr * decay * params`.
    fn step(&mut self, params: &mut [T], grad: &[T], lr: T, decay: T, bc1: T, bc2: T) {
        let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(ADAM_EPS));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * (mhat / (vhat.sqrt() + eps)) - lr * decay * *p;
        }
    }
}

/// Trains on `split.train` with mini-batch AdamW (decoupled weight decay on
/// `W1` and `w2`) and early stopping on validation BCE. Returns the model from
/// the epoch with the lowest validation BCE.
pub fn train<T: Scalar>(
    ds: &LabeledDataset,
    split: &Split,
    hp: &MlpHyperparams,
) -> Result<(MlpModel<T>, TrainingTrace)> {
    hp.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::InvalidData("empty train or validation partition".into()));
    }
    let mut rng = seed::rng(hp.seed);
    let mut model = MlpModel::<T>::init(ds.dim(), hp.clone(), &mut rng)?;
    let (dim, h) = (model.dim(), model.hidden_size());

    let mut opt_w1 = Adam::<T>::new(dim * h);
    let mut opt_b1 = Adam::<T>::new(h);
    let mut opt_w2 = Adam::<T>::new(h);
    let mut opt_b2 = Adam::<T>::new(1);
    let lr = T::of(hp.learning_rate);
    let wd = T::of(hp.weight_decay);
    let mut grad = MlpGradient::zeros(dim, h);
    let mut touched: Vec<u32> = Vec::new();

    let mut order = split.train.clone();
    let mut trace = TrainingTrace::default();
    let mut best: Option<(f64, MlpModel<T>)> = None;
    let mut since_best = 0usize;
    let mut step = 0i32;
    let use_dropout = hp.dropout_rate > 0.0;

    for epoch in 0..hp.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for batch in order.chunks(hp.batch_size) {
            let masks: Option<Vec<Vec<bool>>> =
                use_dropout.then(|| batch.iter().map(|_| model.sample_mask(&mut rng)).collect());
            let loss = model.accumulate_bce(ds, batch, masks.as_deref(), &mut grad, &mut touched);
            epoch_loss = epoch_loss + loss;

            let inv = T::one() / T::of_usize(batch.len());
            touched.sort_unstable();
            touched.dedup();
            for &j in &touched {
                for g in &mut grad.w1[j as usize * h..(j as usize + 1) * h] {
                    *g = *g * inv;
                }
            }
            grad.b1.iter_mut().chain(grad.w2.iter_mut()).for_each(|g| *g = *g * inv);
            grad.b2 = grad.b2 * inv;

            step += 1;
            let bc1 = T::one() - T::of(BETA1).powi(step);
            let bc2 = T::one() - T::of(BETA2).powi(step);
            opt_w1.step(&mut model.w1, &grad.w1, lr, wd, bc1, bc2);
            opt_b1.step(&mut model.b1, &grad.b1, lr, T::zero(), bc1, bc2);
            opt_w2.step(&mut model.w2, &grad.w2, lr, wd, bc1, bc2);
            opt_b2.step(std::slice::from_mut(&mut model.b2), &[grad.b2], lr, T::zero(), bc1, bc2);

            for &j in &touched {
                grad.w1[j as usize * h..(j as usize + 1) * h].fill(T::zero());
            }
            touched.clear();
            grad.b1.fill(T::zero());
            grad.w2.fill(T::zero());
            grad.b2 = T::zero();
        }

        let train_loss = (epoch_loss / T::of_usize(order.len())).f64();
        if !train_loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let val = bce_loss(&model.predict(ds, &split.validation)?).f64();
        if !val.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        trace.train_loss.push(train_loss);
        trace.val_loss.push(val);
        trace.epochs_run = epoch + 1;

        match &best {
            Some((b, _)) if val >= *b => {
                since_best += 1;
                if since_best >= hp.patience {
                    trace.early_stopped = true;
                    break;
                }
            }
            _ => {
                best = Some((val, model.clone()));
                trace.best_epoch = epoch;
                since_best = 0;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch runs");
    Ok((best_model, trace))
}
