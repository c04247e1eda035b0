//! Bayesian linear probing: Bayesian logistic regression on the frozen
//! hidden activations of a trained network, sampled with Hamiltonian Monte
//! Carlo, and predictions averaged over the posterior samples.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, PredictionSet, Split};
use crate::error::{Error, Result};
use crate::metrics::bce_loss;
use crate::mlp::MlpModel;
use crate::scalar::{running_mean, sigmoid, softplus, Scalar};
use crate::seed;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DesignMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: rows * cols,
                right: data.len(),
            });
        }
        if cols == 0 {
            return Err(Error::InvalidParameter("design needs at least one column".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite design entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged design rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Hidden activations of `model` for the given samples, with a trailing
    /// intercept column of ones.
    pub fn from_hidden(model: &MlpModel<T>, ds: &LabeledDataset, indices: &[usize]) -> Result<Self> {
        let cols = model.hidden_size() + 1;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend(model.hidden_activations(ds.vector(i))?);
            data.push(T::one());
        }
        Self::new(indices.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Energy function for HMC: the negative log density up to a constant.
pub trait Potential<T: Scalar>: Sync {
    fn dim(&self) -> usize;

    /// Writes `∇U(q)` into `grad` and returns `U(q)`.
    fn energy_and_grad(&self, q: &[T], grad: &mut [T]) -> T;
}

/// `U(q) = ½ Σ_k (q_k - μ_k)² / σ_k²`.
#[derive(Debug, Clone)]
pub struct GaussianPotential<T> {
    pub mean: Vec<T>,
    pub sd: Vec<T>,
}

impl<T: Scalar> GaussianPotential<T> {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            sd: vec![T::one(); dim],
        }
    }
}

impl<T: Scalar> Potential<T> for GaussianPotential<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn energy_and_grad(&self, q: &[T], grad: &mut [T]) -> T {
        let mut u = T::zero();
        for k in 0..q.len() {
            let z = (q[k] - self.mean[k]) / self.sd[k];
            u = u + z * z;
            grad[k] = z / self.sd[k];
        }
        u * T::of(0.5)
    }
}

/// Logistic regression posterior target: design with intercept column,
/// binary labels and a Gaussian prior of precision `tau` on every weight.
/// The intercept (last column) is under the prior unless
/// [`BlpTarget::with_flat_intercept`] is used.
#[derive(Debug, Clone)]
pub struct BlpTarget<T> {
    design: DesignMatrix<T>,
    labels: Vec<T>,
    tau: T,
    flat_intercept: bool,
}

impl<T: Scalar> BlpTarget<T> {
    pub fn new(design: DesignMatrix<T>, labels: &[u8], tau: f64) -> Result<Self> {
        if labels.len() != design.rows() {
            return Err(Error::LengthMismatch {
                left: design.rows(),
                right: labels.len(),
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("prior precision {tau} must be positive")));
        }
        Ok(Self {
            design,
            labels: labels.iter().map(|&y| T::of(f64::from(y))).collect(),
            tau: T::of(tau),
            flat_intercept: false,
        })
    }

    /// Drops the prior on the last weight (an improper flat prior).
    pub fn with_flat_intercept(mut self) -> Self {
        self.flat_intercept = true;
        self
    }

    pub fn design(&self) -> &DesignMatrix<T> {
        &self.design
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    /// Upper bound on the largest Hessian eigenvalue, `¼ λmax(XᵀX) + τ`,
    /// with `λmax` from power iteration (inflated by 10%).
    fn curvature_bound(&self) -> T {
        let d = self.design.cols();
        let mut v = vec![T::one() / T::of_usize(d).sqrt(); d];
        let mut xv = vec![T::zero(); self.design.rows()];
        let mut lambda = T::zero();
        for _ in 0..30 {
            for (i, o) in xv.iter_mut().enumerate() {
                *o = dot(self.design.row(i), &v);
            }
            let mut w = vec![T::zero(); d];
            for (i, &s) in xv.iter().enumerate() {
                for (wk, &x) in w.iter_mut().zip(self.design.row(i)) {
                    *wk = *wk + s * x;
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm == T::zero() {
                break;
            }
            lambda = norm;
            for (vk, wk) in v.iter_mut().zip(&w) {
                *vk = *wk / norm;
            }
        }
        T::of(0.25 * 1.1) * lambda + self.tau
    }
}

impl<T: Scalar> Potential<T> for BlpTarget<T> {
    fn dim(&self) -> usize {
        self.design.cols()
    }

    fn energy_and_grad(&self, w: &[T], grad: &mut [T]) -> T {
        let mut value = T::zero();
        let prior_dims = w.len() - usize::from(self.flat_intercept);
        grad.fill(T::zero());
        for (g, &wk) in grad.iter_mut().zip(w).take(prior_dims) {
            *g = self.tau * wk;
            value = value + wk * wk;
        }
        value = value * self.tau * T::of(0.5);
        for i in 0..self.design.rows() {
            let x = self.design.row(i);
            let z = dot(x, w);
            let y = self.labels[i];
            value = value + softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, &xk) in grad.iter_mut().zip(x) {
                *g = *g + r * xk;
            }
        }
        value
    }
}

/// Summed BCE of the logistic model plus `(τ/2)‖w‖²`, with its gradient.
pub fn neg_log_posterior<T: Scalar>(target: &BlpTarget<T>, w: &[T]) -> Result<(T, Vec<T>)> {
    if w.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            found: w.len(),
        });
    }
    let mut grad = vec![T::zero(); w.len()];
    let value = target.energy_and_grad(w, &mut grad);
    Ok((value, grad))
}

/// In-place leapfrog. `grad` must hold `∇U(q)` on entry and holds it for the
/// final position on exit. Returns the final potential energy.
fn leapfrog_in_place<T: Scalar, P: Potential<T> + ?Sized>(
    pot: &P,
    q: &mut [T],
    p: &mut [T],
    grad: &mut [T],
    epsilon: T,
    steps: usize,
) -> Result<T> {
    let half = epsilon * T::of(0.5);
    for (pk, &gk) in p.iter_mut().zip(grad.iter()) {
        *pk = *pk - half * gk;
    }
    let mut energy = T::zero();
    for s in 0..steps {
        for (qk, &pk) in q.iter_mut().zip(p.iter()) {
            *qk = *qk + epsilon * pk;
        }
        energy = pot.energy_and_grad(q, grad);
        if !energy.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        let kick = if s + 1 == steps { half } else { epsilon };
        for (pk, &gk) in p.iter_mut().zip(grad.iter()) {
            *pk = *pk - kick * gk;
        }
    }
    if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    Ok(energy)
}

/// `steps` leapfrog steps (half kick, drift, half kick) with identity mass.
pub fn leapfrog<T: Scalar, P: Potential<T> + ?Sized>(
    pot: &P,
    q0: &[T],
    p0: &[T],
    epsilon: T,
    steps: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(epsilon > T::zero()) || steps == 0 {
        return Err(Error::InvalidParameter("need epsilon > 0 and at least one step".into()));
    }
    if q0.len() != pot.dim() || p0.len() != pot.dim() {
        return Err(Error::DimensionMismatch {
            expected: pot.dim(),
            found: q0.len().max(p0.len()),
        });
    }
    let (mut q, mut p) = (q0.to_vec(), p0.to_vec());
    let mut grad = vec![T::zero(); q.len()];
    pot.energy_and_grad(&q, &mut grad);
    leapfrog_in_place(pot, &mut q, &mut p, &mut grad, epsilon, steps)?;
    Ok((q, p))
}

/// `U(q) + ½‖p‖²`.
pub fn hamiltonian<T: Scalar, P: Potential<T> + ?Sized>(pot: &P, q: &[T], p: &[T]) -> T {
    let mut grad = vec![T::zero(); q.len()];
    pot.energy_and_grad(q, &mut grad) + dot(p, p) * T::of(0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    /// Retained samples.
    pub samples: usize,
    pub burn_in: usize,
    /// Leapfrog steps per trajectory.
    pub steps: usize,
    /// Step size, or the starting step size when adapting.
    pub epsilon: f64,
    /// Halve the step size during burn-in until the acceptance rate of a
    /// window reaches 0.6.
    pub adapt_step_size: bool,
    /// Gradient-descent iterations used to find the starting point.
    pub map_iterations: usize,
    /// Leave the intercept out of the Gaussian prior.
    pub flat_intercept: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            samples: 300,
            burn_in: 100,
            steps: 50,
            epsilon: 0.1,
            adapt_step_size: true,
            map_iterations: 500,
            flat_intercept: false,
        }
    }
}

/// Acceptance-rate band targeted by step-size adaptation.
pub const TARGET_ACCEPT: (f64, f64) = (0.6, 0.95);
const ADAPT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples<T> {
    dim: usize,
    /// `samples × dim`, row-major.
    data: Vec<T>,
    pub accept_rate: f64,
    pub burn_in: usize,
    /// Step size used after burn-in.
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    pub divergences: usize,
    pub warnings: Vec<String>,
}

impl<T: Scalar> PosteriorSamples<T> {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, s: usize) -> &[T] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    /// Trace of coordinate `k`.
    pub fn coordinate(&self, k: usize) -> Vec<T> {
        self.iter().map(|s| s[k]).collect()
    }

    pub fn mean(&self) -> Vec<T> {
        (0..self.dim).map(|k| running_mean(self.iter().map(|s| s[k]))).collect()
    }

    /// Collapses to a single sample (used to compare against full averaging).
    pub fn from_single(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("empty weight vector".into()));
        }
        Ok(Self {
            dim: weights.len(),
            data: weights,
            accept_rate: 1.0,
            burn_in: 0,
            epsilon: 0.0,
            steps: 0,
            seed: 0,
            divergences: 0,
            warnings: Vec::new(),
        })
    }
}

/// Metropolis-corrected HMC with standard-normal momenta and identity mass.
/// Rejected proposals repeat the current state; burn-in draws are discarded.
pub fn hmc_sample<T: Scalar, P: Potential<T> + ?Sized>(
    pot: &P,
    init: &[T],
    cfg: &HmcConfig,
    seed: u64,
) -> Result<PosteriorSamples<T>> {
    if cfg.samples == 0 {
        return Err(Error::InvalidParameter("need at least one retained sample".into()));
    }
    if !(cfg.epsilon > 0.0) || cfg.steps == 0 {
        return Err(Error::InvalidParameter("need epsilon > 0 and at least one step".into()));
    }
    let d = pot.dim();
    if init.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: init.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let mut eps = cfg.epsilon;
    let mut q = init.to_vec();
    let mut grad = vec![T::zero(); d];
    let mut energy = pot.energy_and_grad(&q, &mut grad);
    if !energy.is_finite() {
        return Err(Error::NonFiniteState);
    }

    let mut data = Vec::with_capacity(cfg.samples * d);
    let (mut q_new, mut p, mut g_new) = (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
    let (mut window_accepts, mut window_len) = (0usize, 0usize);
    let (mut accepted, mut divergences) = (0usize, 0usize);

    for iter in 0..cfg.burn_in + cfg.samples {
        for pk in p.iter_mut() {
            *pk = T::of(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        }
        let h0 = energy + dot(&p, &p) * T::of(0.5);
        q_new.copy_from_slice(&q);
        g_new.copy_from_slice(&grad);
        let u: f64 = rng.random();
        let accept = match leapfrog_in_place(pot, &mut q_new, &mut p, &mut g_new, T::of(eps), cfg.steps) {
            Ok(e_new) => {
                let dh = (e_new + dot(&p, &p) * T::of(0.5) - h0).f64();
                if dh.is_finite() && u < (-dh).exp() {
                    std::mem::swap(&mut q, &mut q_new);
                    std::mem::swap(&mut grad, &mut g_new);
                    energy = e_new;
                    true
                } else {
                    false
                }
            }
            Err(_) => {
                divergences += 1;
                false
            }
        };

        if iter < cfg.burn_in {
            if cfg.adapt_step_size {
                window_len += 1;
                window_accepts += usize::from(accept);
                if window_len == ADAPT_WINDOW {
                    if (window_accepts as f64 / window_len as f64) < TARGET_ACCEPT.0 {
                        eps *= 0.5;
                    }
                    window_len = 0;
                    window_accepts = 0;
                }
            }
        } else {
            accepted += usize::from(accept);
            data.extend_from_slice(&q);
        }
    }

    let accept_rate = accepted as f64 / cfg.samples as f64;
    let mut warnings = Vec::new();
    if accept_rate < 0.1 {
        let msg = format!("low acceptance rate {accept_rate:.3} at epsilon {eps:.3e}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(PosteriorSamples {
        dim: d,
        data,
        accept_rate,
        burn_in: cfg.burn_in,
        epsilon: eps,
        steps: cfg.steps,
        seed,
        divergences,
        warnings,
    })
}

/// Approximate minimizer of the negative log posterior by Nesterov-accelerated
/// gradient descent with step `1 / L`, `L` a curvature bound.
pub fn map_estimate<T: Scalar>(target: &BlpTarget<T>, iterations: usize) -> Vec<T> {
    let d = target.dim();
    let step = T::one() / target.curvature_bound();
    let mut w = vec![T::zero(); d];
    let mut prev = w.clone();
    let mut look = w.clone();
    let mut grad = vec![T::zero(); d];
    for k in 0..iterations {
        let momentum = T::of_usize(k) / T::of_usize(k + 3);
        for j in 0..d {
            look[j] = w[j] + momentum * (w[j] - prev[j]);
        }
        target.energy_and_grad(&look, &mut grad);
        let gnorm = dot(&grad, &grad).sqrt();
        prev.copy_from_slice(&w);
        for j in 0..d {
            w[j] = look[j] - step * grad[j];
        }
        if gnorm < T::of(1e-10) {
            break;
        }
    }
    w
}

/// MAP initialization followed by HMC.
pub fn fit_blp<T: Scalar>(target: &BlpTarget<T>, cfg: &HmcConfig, seed: u64) -> Result<PosteriorSamples<T>> {
    let init = map_estimate(target, cfg.map_iterations);
    hmc_sample(target, &init, cfg, seed)
}

/// Posterior predictive: mean over samples of `sigmoid(wᵀx)`.
pub fn blp_predict<T: Scalar>(
    samples: &PosteriorSamples<T>,
    design: &DesignMatrix<T>,
    labels: &[u8],
) -> Result<PredictionSet<T>> {
    if design.cols() != samples.dim() {
        return Err(Error::DimensionMismatch {
            expected: samples.dim(),
            found: design.cols(),
        });
    }
    let probs = (0..design.rows())
        .map(|i| {
            let x = design.row(i);
            running_mean(samples.iter().map(|w| sigmoid(dot(w, x))))
        })
        .collect();
    PredictionSet::from_probs(probs, labels.to_vec())
}

/// Posterior predictive for dataset rows, through the model's hidden layer.
pub fn blp_predict_rows<T: Scalar>(
    samples: &PosteriorSamples<T>,
    model: &MlpModel<T>,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<PredictionSet<T>> {
    let design = DesignMatrix::from_hidden(model, ds, indices)?;
    blp_predict(samples, &design, &ds.labels_of(indices))?.with_ids(ds.ids_of(indices))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauScore {
    pub tau: f64,
    /// Validation BCE, or the failure message.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Debug, Clone)]
pub struct PriorSelection<T> {
    pub tau: f64,
    pub scores: Vec<TauScore>,
    /// Posterior fitted at the selected precision.
    pub posterior: PosteriorSamples<T>,
}

/// Fits the probe on the training activations for each prior precision in
/// `taus` and keeps the one with the lowest validation BCE. Ties go to the
/// earlier grid entry. Failing grid points are recorded and skipped.
pub fn select_prior_precision<T: Scalar>(
    model: &MlpModel<T>,
    ds: &LabeledDataset,
    split: &Split,
    taus: &[f64],
    cfg: &HmcConfig,
    seed: u64,
) -> Result<PriorSelection<T>> {
    if taus.is_empty() {
        return Err(Error::InvalidParameter("empty prior precision grid".into()));
    }
    let train = DesignMatrix::from_hidden(model, ds, &split.train)?;
    let val = DesignMatrix::from_hidden(model, ds, &split.validation)?;
    select_prior_precision_on(
        (&train, &ds.labels_of(&split.train)),
        (&val, &ds.labels_of(&split.validation)),
        taus,
        cfg,
        seed,
    )
}

/// [`select_prior_precision`] on explicit training and validation designs.
pub fn select_prior_precision_on<T: Scalar>(
    (train, train_labels): (&DesignMatrix<T>, &[u8]),
    (val, val_labels): (&DesignMatrix<T>, &[u8]),
    taus: &[f64],
    cfg: &HmcConfig,
    seed: u64,
) -> Result<PriorSelection<T>> {
    if taus.is_empty() {
        return Err(Error::InvalidParameter("empty prior precision grid".into()));
    }
    let fits: Vec<Result<(f64, PosteriorSamples<T>)>> = taus
        .par_iter()
        .map(|&tau| {
            let mut target = BlpTarget::new(train.clone(), train_labels, tau)?;
            if cfg.flat_intercept {
                target = target.with_flat_intercept();
            }
            let s = seed::derive_seed(seed, &[seed::tag("blp-tau"), tau.to_bits()]);
            let post = fit_blp(&target, cfg, s)?;
            let bce = bce_loss(&blp_predict(&post, val, val_labels)?).f64();
            Ok((bce, post))
        })
        .collect();

    let mut scores = Vec::with_capacity(taus.len());
    let mut best: Option<(usize, f64)> = None;
    for (k, (fit, &tau)) in fits.iter().zip(taus).enumerate() {
        match fit {
            Ok((bce, _)) => {
                scores.push(TauScore { tau, outcome: Ok(*bce) });
                if best.is_none_or(|(_, b)| *bce < b) {
                    best = Some((k, *bce));
                }
            }
            Err(e) => {
                log::warn!("prior precision {tau} failed: {e}");
                scores.push(TauScore {
                    tau,
                    outcome: Err(e.to_string()),
                });
            }
        }
    }
    let (k, _) = best.ok_or_else(|| {
        Error::InvalidData("every prior precision in the grid failed".into())
    })?;
    let posterior = fits
        .into_iter()
        .nth(k)
        .expect("index from enumeration")
        .expect("best entry succeeded")
        .1;
    Ok(PriorSelection {
        tau: taus[k],
        scores,
        posterior,
    })
}

/// Effective sample size of a scalar chain (Geyer's initial monotone
/// sequence over autocorrelation pairs).
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return n as f64;
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = chain.iter().map(|x| x - mean).collect();
    let var = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (n as f64 * var)
    };
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum += pair;
        prev_pair = pair;
        lag += 2;
    }
    // tau = -1 + 2 * sum of pairs
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    n as f64 / tau
}

/// Text matrix with a `#` diagnostics header and one sample per line.
pub fn save_posterior<T: Scalar>(samples: &PosteriorSamples<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# accept_rate={:.17e} epsilon={:.17e} L={} seed={} burn_in={} divergences={} samples={} dim={}",
        samples.accept_rate,
        samples.epsilon,
        samples.steps,
        samples.seed,
        samples.burn_in,
        samples.divergences,
        samples.len(),
        samples.dim
    );
    for w in samples.iter() {
        let line: Vec<String> = w.iter().map(|v| format!("{:.16e}", v.f64())).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_posterior<T: Scalar>(path: impl AsRef<Path>) -> Result<PosteriorSamples<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.clone(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| err(1, "missing diagnostics header".into()))?;
    let mut fields = std::collections::HashMap::new();
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| err(1, format!("bad header field {tok:?}")))?;
        fields.insert(k, v);
    }
    fn field<V: std::str::FromStr>(
        fields: &std::collections::HashMap<&str, &str>,
        key: &str,
    ) -> Option<V> {
        fields.get(key).and_then(|v| v.parse().ok())
    }
    let get = |key: &str| err(1, format!("missing or bad header field {key}"));
    let dim: usize = field(&fields, "dim").ok_or_else(|| get("dim"))?;
    let count: usize = field(&fields, "samples").ok_or_else(|| get("samples"))?;
    let mut data = Vec::with_capacity(dim * count);
    for (k, line) in lines.enumerate() {
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map(T::of))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|_| err(k + 2, "bad number".into()))?;
        if row.len() != dim {
            return Err(err(k + 2, format!("expected {dim} values")));
        }
        data.extend(row);
    }
    if data.len() != dim * count || dim == 0 || count == 0 {
        return Err(err(0, format!("expected {count} samples of width {dim}")));
    }
    Ok(PosteriorSamples {
        dim,
        data,
        accept_rate: field(&fields, "accept_rate").ok_or_else(|| get("accept_rate"))?,
        burn_in: field(&fields, "burn_in").ok_or_else(|| get("burn_in"))?,
        epsilon: field(&fields, "epsilon").ok_or_else(|| get("epsilon"))?,
        steps: field(&fields, "L").ok_or_else(|| get("L"))?,
        seed: field(&fields, "seed").ok_or_else(|| get("seed"))?,
        divergences: field(&fields, "divergences").ok_or_else(|| get("divergences"))?,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> GaussianPotential<f64> {
        GaussianPotential::standard(1)
    }

    #[test]
    fn one_leapfrog_step_by_hand() {
        let (q, p) = leapfrog(&quadratic(), &[1.0], &[0.0], 0.1, 1).unwrap();
        assert!((q[0] - 0.995).abs() < 1e-15);
        assert!((p[0] + 0.09975).abs() < 1e-15);
    }

    #[test]
    fn leapfrog_is_reversible() {
        let pot = GaussianPotential {
            mean: vec![0.5, -1.0, 2.0],
            sd: vec![1.0, 0.3, 2.0],
        };
        let q0 = [0.1, 0.2, -0.3];
        let p0 = [1.0, -0.5, 0.25];
        let (q, p) = leapfrog(&pot, &q0, &p0, 0.05, 40).unwrap();
        let back_p: Vec<f64> = p.iter().map(|v| -v).collect();
        let (q2, p2) = leapfrog(&pot, &q, &back_p, 0.05, 40).unwrap();
        for k in 0..3 {
            assert!((q2[k] - q0[k]).abs() < 1e-10);
            assert!((p2[k] + p0[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_drift_is_small_on_oscillator() {
        let pot = quadratic();
        let (q, p) = leapfrog(&pot, &[1.0], &[0.0], 0.01, 1000).unwrap();
        let drift = (hamiltonian(&pot, &q, &p) - 0.5).abs();
        assert!(drift < 1e-3, "{drift}");
    }

    #[test]
    fn energy_error_is_second_order() {
        let pot = quadratic();
        let err = |eps: f64| {
            let steps = (2.0 / eps).round() as usize;
            let (q, p) = leapfrog(&pot, &[1.0], &[0.0], eps, steps).unwrap();
            (hamiltonian(&pot, &q, &p) - 0.5).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn leapfrog_rejects_bad_arguments() {
        assert!(leapfrog(&quadratic(), &[1.0], &[0.0], 0.0, 1).is_err());
        assert!(leapfrog(&quadratic(), &[1.0], &[0.0], 0.1, 0).is_err());
        assert!(leapfrog(&quadratic(), &[1.0, 2.0], &[0.0], 0.1, 1).is_err());
    }

    fn logistic_target(n: usize, tau: f64, seed_: u64) -> BlpTarget<f64> {
        let mut rng = seed::rng(seed_);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(0.0..1.0), 1.0])
            .collect();
        let labels: Vec<u8> = rows
            .iter()
            .map(|r| u8::from(rng.random::<f64>() < sigmoid(1.5 * r[0] - r[1] + 0.3)))
            .collect();
        BlpTarget::new(DesignMatrix::from_rows(&rows).unwrap(), &labels, tau).unwrap()
    }

    #[test]
    fn zero_weights_give_n_ln2() {
        let t = logistic_target(37, 1.0, 1);
        let (v, _) = neg_log_posterior(&t, &[0.0; 3]).unwrap();
        assert!((v - 37.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let t = logistic_target(25, 0.7, 2);
        let w = [0.3, -0.8, 0.5];
        let (_, g) = neg_log_posterior(&t, &w).unwrap();
        for k in 0..3 {
            let eps = 1e-6;
            let mut wp = w;
            wp[k] += eps;
            let mut wm = w;
            wm[k] -= eps;
            let num = (neg_log_posterior(&t, &wp).unwrap().0 - neg_log_posterior(&t, &wm).unwrap().0)
                / (2.0 * eps);
            assert!((g[k] - num).abs() / g[k].abs().max(1e-8) < 1e-6, "{k}: {} vs {num}", g[k]);
        }
    }

    #[test]
    fn flat_intercept_leaves_last_weight_free() {
        let t = logistic_target(37, 2.0, 1).with_flat_intercept();
        let w = [0.0, 0.0, 3.0];
        let (v, g) = neg_log_posterior(&t, &w).unwrap();
        let (v0, g0) = neg_log_posterior(&logistic_target(37, 2.0, 1), &w).unwrap();
        assert!((v0 - v - 9.0).abs() < 1e-12);
        assert!((g0[2] - g[2] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn strong_prior_shrinks_minimizer() {
        let norm = |tau: f64| {
            let w = map_estimate(&logistic_target(200, tau, 3), 5000);
            w.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let (weak, strong) = (norm(0.01), norm(100.0));
        assert!(strong < 0.5 * weak, "{weak} vs {strong}");
    }

    #[test]
    fn map_estimate_zeroes_gradient() {
        let t = logistic_target(100, 1.0, 4);
        let w = map_estimate(&t, 3000);
        let (_, g) = neg_log_posterior(&t, &w).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
    }

    #[test]
    fn non_positive_delta_h_always_accepted() {
        // a flat potential conserves H exactly, so every proposal is accepted
        struct Flat;
        impl Potential<f64> for Flat {
            fn dim(&self) -> usize {
                2
            }
            fn energy_and_grad(&self, _q: &[f64], g: &mut [f64]) -> f64 {
                g.fill(0.0);
                0.0
            }
        }
        let cfg = HmcConfig {
            samples: 50,
            burn_in: 0,
            steps: 3,
            epsilon: 0.5,
            adapt_step_size: false,
            map_iterations: 0,
            flat_intercept: false,
        };
        let s = hmc_sample(&Flat, &[0.0, 0.0], &cfg, 1).unwrap();
        assert_eq!(s.accept_rate, 1.0);
    }

    fn normal_cfg(samples: usize) -> HmcConfig {
        HmcConfig {
            samples,
            burn_in: 200,
            steps: 10,
            epsilon: 0.25,
            adapt_step_size: false,
            map_iterations: 0,
            flat_intercept: false,
        }
    }

    #[test]
    fn hmc_is_deterministic_per_seed() {
        let pot = GaussianPotential::<f64>::standard(2);
        let a = hmc_sample(&pot, &[0.0, 0.0], &normal_cfg(100), 3).unwrap();
        let b = hmc_sample(&pot, &[0.0, 0.0], &normal_cfg(100), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_dimensional_normal_moments() {
        let pot = GaussianPotential::<f64>::standard(1);
        for s in 0..5 {
            let post = hmc_sample(&pot, &[0.0], &normal_cfg(4000), 100 + s).unwrap();
            let x: Vec<f64> = post.coordinate(0);
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
            let var = sq.iter().sum::<f64>() / n;
            let se_mean = (1.0 / effective_sample_size(&x)).sqrt();
            let se_var = (2.0 / effective_sample_size(&sq)).sqrt();
            assert!(mean.abs() < 3.0 * se_mean, "seed {s}: mean {mean} se {se_mean}");
            assert!((var - 1.0).abs() < 3.0 * se_var, "seed {s}: var {var} se {se_var}");
        }
    }

    #[test]
    fn adaptation_shrinks_step_size_for_stiff_targets() {
        let pot = GaussianPotential {
            mean: vec![0.0, 0.0],
            sd: vec![0.01, 1.0],
        };
        let cfg = HmcConfig {
            samples: 100,
            burn_in: 100,
            steps: 20,
            epsilon: 0.1,
            adapt_step_size: true,
            map_iterations: 0,
            flat_intercept: false,
        };
        let s = hmc_sample(&pot, &[0.0, 0.0], &cfg, 9).unwrap();
        assert!(s.epsilon < 0.02, "{}", s.epsilon);
        assert!(s.accept_rate > 0.5, "{}", s.accept_rate);
    }

    #[test]
    fn posterior_concentrates_with_more_data() {
        let cfg = HmcConfig {
            samples: 1500,
            burn_in: 200,
            steps: 20,
            epsilon: 0.1,
            adapt_step_size: true,
            map_iterations: 2000,
            flat_intercept: false,
        };
        let sds: Vec<Vec<f64>> = [100usize, 400, 1600]
            .iter()
            .map(|&n| {
                let post = fit_blp(&logistic_target(n, 1.0, 7), &cfg, 5).unwrap();
                (0..3)
                    .map(|k| {
                        let x = post.coordinate(k);
                        let m = x.iter().sum::<f64>() / x.len() as f64;
                        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
                    })
                    .collect()
            })
            .collect();
        for k in 0..3 {
            assert!(sds[1][k] < sds[0][k] && sds[2][k] < sds[1][k], "coord {k}: {sds:?}");
        }
    }

    #[test]
    fn predictions_average_probabilities() {
        let design = DesignMatrix::<f64>::from_rows(&[vec![1.0, 1.0], vec![-2.0, 1.0], vec![0.5, 1.0]]).unwrap();
        let labels = [1u8, 0, 1];
        let single = PosteriorSamples::from_single(vec![0.7, -0.2]).unwrap();
        let p = blp_predict(&single, &design, &labels).unwrap();
        assert!((p.probs()[0] - sigmoid(0.5)).abs() < 1e-15);

        let t = logistic_target(30, 1.0, 8);
        let post = fit_blp(
            &t,
            &HmcConfig {
                samples: 200,
                burn_in: 50,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let full = blp_predict(&post, t.design(), &[0u8; 30]).unwrap();
        let collapsed = blp_predict(
            &PosteriorSamples::from_single(post.mean()).unwrap(),
            t.design(),
            &[0u8; 30],
        )
        .unwrap();
        assert_ne!(full.probs(), collapsed.probs());
        for i in 0..30 {
            let per: Vec<f64> = post.iter().map(|w| sigmoid(dot(w, t.design().row(i)))).collect();
            let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(full.probs()[i] >= lo - 1e-15 && full.probs()[i] <= hi + 1e-15);
        }
    }

    #[test]
    fn equal_samples_match_plain_logistic() {
        let design = DesignMatrix::from_rows(&[vec![1.0, 1.0], vec![-2.0, 1.0]]).unwrap();
        let w = vec![0.7, -0.2];
        let mut post = PosteriorSamples::from_single(w.clone()).unwrap();
        post.data = [w.clone(), w.clone(), w.clone()].concat();
        let p = blp_predict(&post, &design, &[1, 0]).unwrap();
        assert_eq!(p.probs()[1], sigmoid(-2.0 * 0.7 - 0.2));
    }

    fn quick_cfg() -> HmcConfig {
        HmcConfig {
            samples: 100,
            burn_in: 50,
            steps: 20,
            ..Default::default()
        }
    }

    /// One feature plus intercept; labels follow the sign of the feature
    /// (separable) or a logistic curve of slope 1 (overlapping).
    fn one_feature(n: usize, separable: bool, seed_: u64) -> (DesignMatrix<f64>, Vec<u8>) {
        let mut rng = seed::rng(seed_);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.random_range(-3.0..3.0);
            let y = if separable {
                u8::from(x > 0.0)
            } else {
                u8::from(rng.random::<f64>() < sigmoid(x))
            };
            rows.push(vec![x, 1.0]);
            labels.push(y);
        }
        (DesignMatrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn single_tau_grid_returns_it() {
        let (x, y) = one_feature(40, false, 1);
        let sel = select_prior_precision_on((&x, &y), (&x, &y), &[0.3], &quick_cfg(), 1).unwrap();
        assert_eq!(sel.tau, 0.3);
        assert_eq!(sel.scores.len(), 1);
    }

    #[test]
    fn tau_selection_tracks_overlap() {
        let taus = [1e-4, 1e-2, 1.0, 100.0, 1e4];
        let pick = |separable: bool| {
            let (xt, yt) = one_feature(200, separable, 2);
            let (xv, yv) = one_feature(200, separable, 3);
            let sel = select_prior_precision_on((&xt, &yt), (&xv, &yv), &taus, &quick_cfg(), 4).unwrap();
            let probs = blp_predict(&sel.posterior, &xv, &yv).unwrap().probs().to_vec();
            (sel.tau, probs)
        };
        let (sep_tau, sep_probs) = pick(true);
        let (ovl_tau, _) = pick(false);
        assert!(sep_tau <= 1e-2, "{sep_tau}");
        let extreme = sep_probs.iter().filter(|&&p| !(0.05..=0.95).contains(&p)).count();
        assert!(extreme as f64 > 0.8 * sep_probs.len() as f64);
        assert!((1e-2..=100.0).contains(&ovl_tau), "{ovl_tau}");
        assert!(ovl_tau > sep_tau);
    }

    #[test]
    fn tau_selection_is_deterministic() {
        let (x, y) = one_feature(60, false, 5);
        let taus = [0.01, 1.0, 100.0];
        let a = select_prior_precision_on((&x, &y), (&x, &y), &taus, &quick_cfg(), 7).unwrap();
        let b = select_prior_precision_on((&x, &y), (&x, &y), &taus, &quick_cfg(), 7).unwrap();
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.posterior, b.posterior);
    }

    #[test]
    fn failing_grid_points_are_skipped() {
        let (x, y) = one_feature(30, false, 6);
        let sel = select_prior_precision_on((&x, &y), (&x, &y), &[-1.0, 1.0], &quick_cfg(), 1).unwrap();
        assert_eq!(sel.tau, 1.0);
        assert!(sel.scores[0].outcome.is_err());
        assert!(select_prior_precision_on((&x, &y), (&x, &y), &[-1.0], &quick_cfg(), 1).is_err());
    }

    #[test]
    fn posterior_file_roundtrip() {
        let t = logistic_target(20, 1.0, 1);
        let post = fit_blp(
            &t,
            &HmcConfig {
                samples: 20,
                burn_in: 10,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("post.txt");
        save_posterior(&post, &path).unwrap();
        let back: PosteriorSamples<f64> = load_posterior(&path).unwrap();
        assert_eq!(back.data, post.data);
        assert_eq!(back.epsilon, post.epsilon);
        assert_eq!(back.accept_rate, post.accept_rate);
        assert_eq!(back.steps, post.steps);
    }

    #[test]
    fn ess_of_independent_draws_is_near_n() {
        let mut rng = seed::rng(3);
        let x: Vec<f64> = (0..4000)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let ess = effective_sample_size(&x);
        assert!(ess > 3000.0 && ess < 5000.0, "{ess}");
        // AR(1) with coefficient 0.9 has ESS ≈ n (1-0.9)/(1+0.9)
        let mut y = vec![0.0; 20000];
        for k in 1..y.len() {
            y[k] = 0.9 * y[k - 1] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        let ess = effective_sample_size(&y);
        let expected = 20000.0 * 0.1 / 1.9;
        assert!((ess / expected - 1.0).abs() < 0.3, "{ess} vs {expected}");
    }
}
