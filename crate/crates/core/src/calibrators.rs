//! Post hoc and sampling-based calibration: Platt scaling, Monte Carlo
//! dropout and deep ensembles. Each produces a [`PredictionSet`].
//!
//! Averaging happens in probability space; the stored logit of an averaged
//! prediction is the logit of the mean probability.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, PredictionSet, Split};
use crate::error::{Error, Result};
use crate::mlp::{self, MlpHyperparams, MlpModel};
use crate::scalar::{running_mean, sigmoid, Scalar};
use crate::seed;

/// Ridge on `(a, b)` in the Platt objective.
pub const PLATT_RIDGE: f64 = 1e-6;
const PLATT_TOL: f64 = 1e-8;
const PLATT_MAX_ITER: usize = 100;
/// Smallest slope `platt_fit` returns. A positive slope keeps the map strictly
/// increasing, so rankings and AUC are unchanged.
pub const PLATT_MIN_SLOPE: f64 = 1e-3;

/// Affine map on logits: `sigmoid(a * logit + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
}

impl PlattParams {
    pub const IDENTITY: PlattParams = PlattParams { a: 1.0, b: 0.0 };
}

/// Negative log-likelihood of `(a, b)` plus the ridge, with gradient and
/// Hessian.
fn platt_objective(z: &[f64], y: &[f64], a: f64, b: f64) -> (f64, [f64; 2], [f64; 3]) {
    let mut f = 0.5 * PLATT_RIDGE * (a * a + b * b);
    let mut g = [PLATT_RIDGE * a, PLATT_RIDGE * b];
    let mut h = [PLATT_RIDGE, 0.0, PLATT_RIDGE];
    for (&zi, &yi) in z.iter().zip(y) {
        let s = a * zi + b;
        f += crate::scalar::softplus(s) - yi * s;
        let p = sigmoid(s);
        let r = p - yi;
        g[0] += r * zi;
        g[1] += r;
        let w = p * (1.0 - p);
        h[0] += w * zi * zi;
        h[1] += w * zi;
        h[2] += w;
    }
    (f, g, h)
}

/// Maximum-likelihood fit of `sigmoid(a * logit + b)` to the labels by damped
/// Newton iterations, with an L2 ridge of `1e-6` on `(a, b)`. Stops when the
/// gradient norm of the mean loss falls below `1e-8` or after 100 iterations.
///
/// The slope is constrained to `a >= PLATT_MIN_SLOPE`. When the scores
/// anti-correlate with the labels the constrained optimum sits on that bound,
/// and only `b` is refitted there, which maps every score close to the base
/// rate instead of reversing the ranking.
pub fn platt_fit<T: Scalar>(calib: &PredictionSet<T>) -> Result<PlattParams> {
    let pos = calib.positives();
    if pos == 0 || pos == calib.len() {
        return Err(Error::SingleClass("calibration set".into()));
    }
    let z: Vec<f64> = calib.logits().iter().map(|v| v.f64()).collect();
    let y: Vec<f64> = calib.labels().iter().map(|&v| f64::from(v)).collect();
    let free = newton_fit(&z, &y)?;
    if free.a >= PLATT_MIN_SLOPE {
        return Ok(free);
    }
    log::warn!(
        "Platt slope {} below {PLATT_MIN_SLOPE}: scores do not rank the labels; refitting the offset only",
        free.a
    );
    intercept_fit(&z, &y, PLATT_MIN_SLOPE)
}

/// Newton iterations on `b` with the slope held at `a`.
fn intercept_fit(z: &[f64], y: &[f64], a: f64) -> Result<PlattParams> {
    let mut b = 0.0;
    let tol = PLATT_TOL * z.len() as f64;
    for _ in 0..PLATT_MAX_ITER {
        let (_, g, h) = platt_objective(z, y, a, b);
        if g[1].abs() < tol {
            return Ok(PlattParams { a, b });
        }
        // the objective is convex in b, so a clipped Newton step converges
        b -= (g[1] / h[2]).clamp(-5.0, 5.0);
    }
    Err(Error::PlattNotConverged { a, b })
}

fn newton_fit(z: &[f64], y: &[f64]) -> Result<PlattParams> {
    let (mut a, mut b) = (1.0, 0.0);
    let (mut f, mut g, mut h) = platt_objective(z, y, a, b);
    let tol = PLATT_TOL * z.len() as f64;
    for _ in 0..PLATT_MAX_ITER {
        if g[0].hypot(g[1]) < tol {
            return Ok(PlattParams { a, b });
        }
        let det = h[0] * h[2] - h[1] * h[1];
        let (da, db) = if det > 0.0 {
            ((h[2] * g[0] - h[1] * g[1]) / det, (h[0] * g[1] - h[1] * g[0]) / det)
        } else {
            (g[0], g[1])
        };
        let mut step = 1.0;
        loop {
            let (na, nb) = (a - step * da, b - step * db);
            let (nf, ng, nh) = platt_objective(z, y, na, nb);
            // Near the optimum the decrease in f drowns in rounding, so a
            // smaller gradient also counts as progress.
            let sufficient = nf <= f + 1e-4 * step * -(g[0] * da + g[1] * db);
            if sufficient || ng[0].hypot(ng[1]) < g[0].hypot(g[1]) || step < 1e-10 {
                a = na;
                b = nb;
                f = nf;
                g = ng;
                h = nh;
                break;
            }
            step *= 0.5;
        }
        if (step * da).hypot(step * db) < 1e-14 * (1.0 + a.hypot(b)) {
            break;
        }
    }
    if g[0].hypot(g[1]) < tol {
        Ok(PlattParams { a, b })
    } else {
        Err(Error::PlattNotConverged { a, b })
    }
}

/// Applies the affine map to every logit.
pub fn platt_apply<T: Scalar>(params: PlattParams, p: &PredictionSet<T>) -> Result<PredictionSet<T>> {
    let (a, b) = (T::of(params.a), T::of(params.b));
    let logits = p.logits().iter().map(|&z| a * z + b).collect();
    let out = PredictionSet::from_logits(logits, p.labels().to_vec())?;
    match p.ids() {
        Some(ids) => out.with_ids(ids.to_vec()),
        None => Ok(out),
    }
}

fn averaged<T: Scalar>(
    probs: Vec<T>,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<PredictionSet<T>> {
    PredictionSet::from_probs(probs, ds.labels_of(indices))?.with_ids(ds.ids_of(indices))
}

/// Mean probability over `passes` stochastic forward passes, with a fresh
/// dropout mask per pass and per sample. Each sample draws its masks from its
/// own stream derived from `seed` and its position, so the result does not
/// depend on thread scheduling.
pub fn mc_dropout_predict<T: Scalar>(
    model: &MlpModel<T>,
    ds: &LabeledDataset,
    indices: &[usize],
    passes: usize,
    seed: u64,
) -> Result<PredictionSet<T>> {
    if passes == 0 {
        return Err(Error::InvalidParameter("need at least one dropout pass".into()));
    }
    if model.hyperparams().dropout_rate == 0.0 {
        return model.predict(ds, indices);
    }
    let probs = indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut rng = seed::rng(seed::derive_seed(seed, &[k as u64]));
            let x = ds.vector(i);
            let mut draws = Vec::with_capacity(passes);
            for _ in 0..passes {
                let mask = model.sample_mask(&mut rng);
                draws.push(sigmoid(model.forward_logit(x, Some(&mask))?));
            }
            Ok(running_mean(draws))
        })
        .collect::<Result<Vec<T>>>()?;
    averaged(probs, ds, indices)
}

/// Independently initialized members trained on the same data.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    members: Vec<MlpModel<T>>,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(members: Vec<MlpModel<T>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidParameter("an ensemble needs at least 2 members".into()));
        }
        let (d, h) = (members[0].dim(), members[0].hidden_size());
        if members.iter().any(|m| m.dim() != d || m.hidden_size() != h) {
            return Err(Error::InvalidParameter("ensemble members differ in shape".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[MlpModel<T>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Seed of ensemble member `index` under master seed `seed`.
pub fn member_seed(seed: u64, index: usize) -> u64 {
    seed::derive_seed(seed, &[seed::tag("ensemble-member"), index as u64])
}

/// Trains `size` members with seeds derived from `seed`.
pub fn ensemble_train<T: Scalar>(
    ds: &LabeledDataset,
    split: &Split,
    hp: &MlpHyperparams,
    size: usize,
    seed: u64,
) -> Result<Ensemble<T>> {
    if size < 2 {
        return Err(Error::InvalidParameter("an ensemble needs at least 2 members".into()));
    }
    let members = (0..size)
        .into_par_iter()
        .map(|index| {
            let hp = MlpHyperparams {
                seed: member_seed(seed, index),
                ..hp.clone()
            };
            mlp::train::<T>(ds, split, &hp)
                .map(|(m, _)| m)
                .map_err(|e| Error::MemberFailed {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members)
}

/// Mean of the member probabilities.
pub fn ensemble_predict<T: Scalar>(
    ensemble: &Ensemble<T>,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<PredictionSet<T>> {
    let per_member = ensemble
        .members
        .iter()
        .map(|m| m.predict(ds, indices))
        .collect::<Result<Vec<_>>>()?;
    let probs = (0..indices.len())
        .map(|k| running_mean(per_member.iter().map(|p| p.probs()[k])))
        .collect();
    averaged(probs, ds, indices)
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    format_version: u32,
    members: Vec<String>,
}

/// Writes `member_NNN.mlp` files and a `manifest.toml` into `dir`.
pub fn save_ensemble<T: Scalar>(ensemble: &Ensemble<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (i, m) in ensemble.members.iter().enumerate() {
        let name = format!("member_{i:03}.mlp");
        mlp::save_model(m, dir.join(&name))?;
        names.push(name);
    }
    let manifest = EnsembleManifest {
        format_version: 1,
        members: names,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_ensemble<T: Scalar>(dir: impl AsRef<Path>) -> Result<Ensemble<T>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EnsembleManifest =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let members = manifest
        .members
        .iter()
        .map(|name| mlp::load_model(dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SparseBinaryVector;
    use crate::metrics::auc;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Logits ~ N(0, 2^2), labels ~ Bernoulli(sigmoid(a * z + b)).
    fn simulated(n: usize, a: f64, b: f64, seed_: u64) -> PredictionSet<f64> {
        let mut rng = seed::rng(seed_);
        let z: Vec<f64> = (0..n)
            .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let y = z
            .iter()
            .map(|&zi| u8::from(rng.random::<f64>() < sigmoid(a * zi + b)))
            .collect();
        PredictionSet::from_logits(z, y).unwrap()
    }

    #[test]
    fn recovers_identity_generator() {
        let p = platt_fit(&simulated(50_000, 1.0, 0.0, 1)).unwrap();
        assert!((p.a - 1.0).abs() < 0.05 && p.b.abs() < 0.05, "{p:?}");
    }

    #[test]
    fn recovers_affine_generator() {
        let p = platt_fit(&simulated(50_000, 2.0, -1.0, 2)).unwrap();
        assert!((p.a - 2.0).abs() < 0.1 && (p.b + 1.0).abs() < 0.1, "{p:?}");
    }

    #[test]
    fn constant_scores_map_to_base_rate() {
        // 30 positives out of 100 and a constant logit: the free optimum has a
        // nonpositive slope, so the slope sits on its floor and the offset
        // reproduces the base rate.
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 30)).collect();
        let target = (0.3f64 / 0.7).ln();
        for c in [0.0, 2.0] {
            let p = platt_fit(&PredictionSet::<f64>::from_logits(vec![c; 100], labels.clone()).unwrap()).unwrap();
            assert_eq!(p.a, PLATT_MIN_SLOPE);
            assert!((p.a * c + p.b - target).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn anti_correlated_scores_keep_their_ranking() {
        let raw = simulated(5_000, -1.5, 0.3, 9);
        let p = platt_fit(&raw).unwrap();
        assert_eq!(p.a, PLATT_MIN_SLOPE);
        let scaled = platt_apply(p, &raw).unwrap();
        assert_eq!(auc(&raw).unwrap().to_bits(), auc(&scaled).unwrap().to_bits());
        let mean_prob = scaled.probs().iter().sum::<f64>() / scaled.len() as f64;
        assert!((mean_prob - raw.base_rate()).abs() < 1e-3, "{mean_prob}");
    }

    #[test]
    fn single_class_is_rejected() {
        let p = PredictionSet::<f64>::from_logits(vec![0.1, 0.2], vec![1, 1]).unwrap();
        assert!(matches!(platt_fit(&p), Err(Error::SingleClass(_))));
    }

    #[test]
    fn apply_examples() {
        let p = PredictionSet::<f64>::from_logits(vec![-1.0, 0.0, 2.5], vec![0, 1, 1]).unwrap();
        assert_eq!(platt_apply(PlattParams::IDENTITY, &p).unwrap(), p);
        let shifted = platt_apply(PlattParams { a: 1.0, b: -0.5 }, &p).unwrap();
        assert!((shifted.probs()[1] - 0.377_541).abs() < 1e-6);
        assert!((shifted.probs()[1] - 1.0 / (1.0 + 0.5f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn refit_after_apply_is_near_identity() {
        let raw = simulated(20_000, 1.7, 0.4, 5);
        let params = platt_fit(&raw).unwrap();
        let calibrated = platt_apply(params, &raw).unwrap();
        let again = platt_fit(&calibrated).unwrap();
        assert!((again.a - 1.0).abs() < 1e-6 && again.b.abs() < 1e-6, "{again:?}");
    }

    fn toy(n: usize, seed_: u64) -> (LabeledDataset, Split) {
        let mut rng = seed::rng(seed_);
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = u8::from(i % 4 == 0);
            let off = if y == 1 { 10 } else { 0 };
            let idx = (0..4).map(|_| off + rng.random_range(0..14u32)).collect();
            vectors.push(SparseBinaryVector::from_unsorted(24, idx).unwrap());
            labels.push(y);
        }
        let ids = (0..n).map(|i| format!("t{i}")).collect();
        let ds = LabeledDataset::new(24, vectors, labels, ids).unwrap();
        let split = Split {
            train: (0..n).filter(|i| i % 5 >= 2).collect(),
            validation: (0..n).filter(|i| i % 5 == 1).collect(),
            test: (0..n).filter(|i| i % 5 == 0).collect(),
        };
        (ds, split)
    }

    fn hp(dropout: f64) -> MlpHyperparams {
        MlpHyperparams {
            hidden_size: 8,
            dropout_rate: dropout,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            max_epochs: 15,
            patience: 3,
            batch_size: 32,
            seed: 3,
        }
    }

    #[test]
    fn platt_keeps_auc_of_trained_model() {
        let (ds, split) = toy(400, 1);
        let (m, _) = mlp::train::<f64>(&ds, &split, &hp(0.2)).unwrap();
        let val = m.predict(&ds, &split.validation).unwrap();
        let test = m.predict(&ds, &split.test).unwrap();
        let params = platt_fit(&val).unwrap();
        let after = platt_apply(params, &test).unwrap();
        assert_eq!(auc(&test).unwrap(), auc(&after).unwrap());
    }

    #[test]
    fn mc_dropout_without_dropout_is_deterministic_prediction() {
        let (ds, split) = toy(200, 2);
        let (m, _) = mlp::train::<f64>(&ds, &split, &hp(0.0)).unwrap();
        let det = m.predict(&ds, &split.test).unwrap();
        for t in [1, 7] {
            assert_eq!(mc_dropout_predict(&m, &ds, &split.test, t, 11).unwrap(), det);
        }
    }

    #[test]
    fn mc_dropout_is_reproducible() {
        let (ds, split) = toy(200, 2);
        let (m, _) = mlp::train::<f64>(&ds, &split, &hp(0.5)).unwrap();
        let a = mc_dropout_predict(&m, &ds, &split.test, 1, 4).unwrap();
        let b = mc_dropout_predict(&m, &ds, &split.test, 1, 4).unwrap();
        assert_eq!(a, b);
        let c = mc_dropout_predict(&m, &ds, &split.test, 1, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mc_dropout_converges() {
        let hpv = MlpHyperparams {
            hidden_size: 6,
            dropout_rate: 0.5,
            ..hp(0.5)
        };
        let mut rng = seed::rng(8);
        let mut model = MlpModel::<f64>::init(24, hpv, &mut rng).unwrap();
        for b in model.params_mut()[1].iter_mut() {
            *b = 0.4;
        }
        let (ds, _) = toy(40, 3);
        let rows = [0usize, 1, 2];
        let reference = mc_dropout_predict(&model, &ds, &rows, 100_000, 1).unwrap();
        let estimate = mc_dropout_predict(&model, &ds, &rows, 10_000, 2).unwrap();
        for (k, &i) in rows.iter().enumerate() {
            // per-pass spread of the probability, estimated directly
            let mut r = seed::rng(77);
            let draws: Vec<f64> = (0..10_000)
                .map(|_| {
                    let mask = model.sample_mask(&mut r);
                    sigmoid(model.forward_logit(ds.vector(i), Some(&mask)).unwrap())
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 9_999.0).sqrt();
            let se = sd * (1.0 / 10_000f64 + 1.0 / 100_000f64).sqrt();
            let gap = (estimate.probs()[k] - reference.probs()[k]).abs();
            assert!(gap <= 3.0 * se, "row {i}: gap {gap} se {se}");
        }
    }

    #[test]
    fn ensemble_training_and_prediction() {
        let (ds, split) = toy(200, 4);
        let e1 = ensemble_train::<f64>(&ds, &split, &hp(0.1), 2, 42).unwrap();
        let e2 = ensemble_train::<f64>(&ds, &split, &hp(0.1), 2, 42).unwrap();
        assert_eq!(e1, e2);
        assert!(e1.members()[0].distance(&e1.members()[1]) > 0.0);

        let p = ensemble_predict(&e1, &ds, &split.test).unwrap();
        let m0 = e1.members()[0].predict(&ds, &split.test).unwrap();
        let m1 = e1.members()[1].predict(&ds, &split.test).unwrap();
        for k in 0..p.len() {
            let (lo, hi) = (m0.probs()[k].min(m1.probs()[k]), m0.probs()[k].max(m1.probs()[k]));
            assert!(p.probs()[k] >= lo && p.probs()[k] <= hi);
        }
        assert!(ensemble_train::<f64>(&ds, &split, &hp(0.1), 1, 0).is_err());
    }

    #[test]
    fn identical_members_match_single_model() {
        let (ds, split) = toy(200, 5);
        let (m, _) = mlp::train::<f64>(&ds, &split, &hp(0.0)).unwrap();
        let e = Ensemble::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
        assert_eq!(
            ensemble_predict(&e, &ds, &split.test).unwrap().probs(),
            m.predict(&ds, &split.test).unwrap().probs()
        );
    }

    #[test]
    fn two_member_average() {
        // members with constant outputs 0.2 and 0.8 via the output bias
        let z = |p: f64| (p / (1.0 - p)).ln();
        let mk = |p: f64| {
            MlpModel::<f64>::from_weights(24, &[vec![0.0; 24]], vec![0.0], vec![0.0], z(p), hp(0.0).with_hidden(1))
                .unwrap()
        };
        let (ds, split) = toy(40, 6);
        let e = Ensemble::new(vec![mk(0.2), mk(0.8)]).unwrap();
        let p = ensemble_predict(&e, &ds, &split.test).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    impl MlpHyperparams {
        fn with_hidden(mut self, h: usize) -> Self {
            self.hidden_size = h;
            self
        }
    }

    #[test]
    fn ensemble_checkpoint_roundtrip() {
        let (ds, split) = toy(120, 7);
        let e = ensemble_train::<f64>(&ds, &split, &hp(0.1), 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(&e, dir.path().join("ens")).unwrap();
        let back: Ensemble<f64> = load_ensemble(dir.path().join("ens")).unwrap();
        assert_eq!(back, e);
    }
}
