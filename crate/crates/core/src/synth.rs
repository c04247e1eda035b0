//! Synthetic sparse-fingerprint data with known Bayes-optimal probabilities.
//!
//! Every sample carries a class-independent scaffold (a fixed bit pattern
//! shared by many samples, which gives the clustering something to find),
//! class-independent noise bits, and bits from two informative blocks. Block
//! `A` fires with rate `signal_rate` in actives and block `B` in inactives;
//! `overlap` mixes the two class profiles, so at `overlap = 0.5` the classes
//! are generated identically.
//!
//! With `scaffold_heterogeneity > 0` each scaffold gets its own active rate
//! (logit-normal around `active_ratio`, rescaled to keep the overall rate),
//! so held-out clusters differ from the training clusters.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SparseBinaryVector};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    /// Probability that a sample is active.
    pub active_ratio: f64,
    /// Mixing weight in `[0, 0.5]` between the two class profiles.
    pub overlap: f64,
    /// Bits per informative block.
    pub informative_bits: usize,
    pub signal_rate: f64,
    pub scaffolds: usize,
    pub scaffold_bits: usize,
    /// Bits from which scaffold patterns are drawn.
    pub scaffold_pool: usize,
    pub noise_bits: usize,
    pub noise_rate: f64,
    /// Standard deviation of the per-scaffold active-rate logits.
    pub scaffold_heterogeneity: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            active_ratio: 0.25,
            overlap: 0.2,
            informative_bits: 48,
            signal_rate: 0.12,
            scaffolds: 60,
            scaffold_bits: 40,
            scaffold_pool: 512,
            noise_bits: 256,
            noise_rate: 0.02,
            scaffold_heterogeneity: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn dim(&self) -> usize {
        2 * self.informative_bits + self.scaffold_pool + self.noise_bits
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.n < 2 {
            return bad("need at least two samples");
        }
        if !(self.active_ratio > 0.0 && self.active_ratio < 1.0) {
            return bad("active_ratio must be in (0, 1)");
        }
        if !(0.0..=0.5).contains(&self.overlap) {
            return bad("overlap must be in [0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.signal_rate) || !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("rates must be in [0, 1]");
        }
        if self.informative_bits == 0 {
            return bad("need informative bits");
        }
        if !(self.scaffold_heterogeneity >= 0.0 && self.scaffold_heterogeneity.is_finite()) {
            return bad("scaffold_heterogeneity must be nonnegative");
        }
        if self.scaffolds == 0 || self.scaffold_bits > self.scaffold_pool {
            return bad("need at least one scaffold of at most scaffold_pool bits");
        }
        Ok(())
    }

    /// Firing rates of a block-`A` bit for `(inactive, active)` samples.
    fn block_a_rates(&self) -> (f64, f64) {
        let o = self.overlap;
        let s = self.signal_rate;
        (o * s, (1.0 - o) * s)
    }
}

/// Generated data with the Bayes-optimal `P(active | x)` per sample.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: LabeledDataset,
    pub bayes_probs: Vec<f64>,
    /// Scaffold index of every sample.
    pub scaffold_of: Vec<usize>,
    /// Active rate of every scaffold.
    pub scaffold_rates: Vec<f64>,
}

fn bernoulli_loglik(rate: f64, bit: bool) -> f64 {
    if bit {
        rate.ln()
    } else {
        (1.0 - rate).ln()
    }
}

/// `P(active | x)` under the generator for a sample whose scaffold has
/// active rate `prior`. Noise bits are class-independent and cancel.
pub fn bayes_probability(spec: &SynthSpec, x: &SparseBinaryVector, prior: f64) -> f64 {
    let (r0, r1) = spec.block_a_rates();
    let m = spec.informative_bits as u32;
    let on = |j: u32| x.indices().binary_search(&j).is_ok();
    let (mut l0, mut l1) = ((1.0 - prior).ln(), prior.ln());
    for j in 0..m {
        // block A: rates (r0, r1); block B mirrors them
        l0 += bernoulli_loglik(r0, on(j)) + bernoulli_loglik(r1, on(m + j));
        l1 += bernoulli_loglik(r1, on(j)) + bernoulli_loglik(r0, on(m + j));
    }
    match (l0 == f64::NEG_INFINITY, l1 == f64::NEG_INFINITY) {
        (true, false) => 1.0,
        (false, true) => 0.0,
        (true, true) => prior,
        _ => {
            let d = l0 - l1;
            if d == 0.0 {
                0.5
            } else {
                1.0 / (1.0 + d.exp())
            }
        }
    }
}

/// Deterministic dataset for `(spec, seed)`.
pub fn make_synthetic(spec: &SynthSpec, seed_: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive_seed(seed_, &[seed::tag("synthetic")]));
    let dim = spec.dim();
    let m = spec.informative_bits as u32;
    let scaffold_base = 2 * m;
    let noise_base = scaffold_base + spec.scaffold_pool as u32;
    let patterns: Vec<Vec<u32>> = (0..spec.scaffolds)
        .map(|_| {
            sample(&mut rng, spec.scaffold_pool, spec.scaffold_bits)
                .into_iter()
                .map(|j| scaffold_base + j as u32)
                .collect()
        })
        .collect();
    let rates = scaffold_rates(spec, &mut rng);
    let (r0, r1) = spec.block_a_rates();

    let mut scaffold_of = Vec::with_capacity(spec.n);
    let mut vectors = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    let mut bayes = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let s = rng.random_range(0..spec.scaffolds);
        let y = u8::from(rng.random::<f64>() < rates[s]);
        let (ra, rb) = if y == 1 { (r1, r0) } else { (r0, r1) };
        let mut idx = patterns[s].clone();
        for j in 0..m {
            if rng.random::<f64>() < ra {
                idx.push(j);
            }
            if rng.random::<f64>() < rb {
                idx.push(m + j);
            }
        }
        for j in 0..spec.noise_bits as u32 {
            if rng.random::<f64>() < spec.noise_rate {
                idx.push(noise_base + j);
            }
        }
        let v = SparseBinaryVector::from_unsorted(dim, idx)?;
        bayes.push(bayes_probability(spec, &v, rates[s]));
        scaffold_of.push(s);
        vectors.push(v);
        labels.push(y);
    }
    let ids = (0..spec.n).map(|i| format!("syn{i:06}")).collect();
    Ok(SyntheticData {
        dataset: LabeledDataset::new(dim, vectors, labels, ids)?,
        bayes_probs: bayes,
        scaffold_of,
        scaffold_rates: rates,
    })
}

fn scaffold_rates(spec: &SynthSpec, rng: &mut seed::Rng) -> Vec<f64> {
    if spec.scaffold_heterogeneity == 0.0 {
        return vec![spec.active_ratio; spec.scaffolds];
    }
    let base = (spec.active_ratio / (1.0 - spec.active_ratio)).ln();
    let raw: Vec<f64> = (0..spec.scaffolds)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            1.0 / (1.0 + (-(base + spec.scaffold_heterogeneity * z)).exp())
        })
        .collect();
    let scale = spec.active_ratio * raw.len() as f64 / raw.iter().sum::<f64>();
    raw.iter().map(|r| (r * scale).clamp(1e-3, 1.0 - 1e-3)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = SynthSpec {
            n: 300,
            ..Default::default()
        };
        let a = make_synthetic(&spec, 4).unwrap();
        let b = make_synthetic(&spec, 4).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.bayes_probs, b.bayes_probs);
        assert_ne!(make_synthetic(&spec, 5).unwrap().dataset, a.dataset);
    }

    #[test]
    fn realized_active_ratio() {
        let spec = SynthSpec {
            n: 10_000,
            active_ratio: 0.08,
            ..Default::default()
        };
        let r = make_synthetic(&spec, 1).unwrap().dataset.active_ratio();
        assert!((r - 0.08).abs() < 0.01, "{r}");
    }

    #[test]
    fn symmetric_overlap_gives_half() {
        let spec = SynthSpec {
            n: 500,
            active_ratio: 0.5,
            overlap: 0.5,
            ..Default::default()
        };
        let d = make_synthetic(&spec, 2).unwrap();
        assert!(d.bayes_probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn zero_overlap_is_separable() {
        // samples with any informative bit are certain; the rare sample with
        // none falls back to the prior
        let spec = SynthSpec {
            n: 2000,
            overlap: 0.0,
            ..Default::default()
        };
        let d = make_synthetic(&spec, 3).unwrap();
        let m = 2 * spec.informative_bits as u32;
        let mut certain = 0;
        for ((&p, &y), v) in d.bayes_probs.iter().zip(d.dataset.labels()).zip(d.dataset.vectors()) {
            if v.indices().iter().any(|&j| j < m) {
                assert_eq!(p, f64::from(y));
                certain += 1;
            } else {
                assert!((p - spec.active_ratio).abs() < 1e-12);
            }
        }
        assert!(certain > 1980, "{certain}");
    }

    #[test]
    fn bayes_probabilities_are_calibrated() {
        // within each probability decile the positive rate tracks the mean
        let spec = SynthSpec {
            n: 20_000,
            overlap: 0.3,
            ..Default::default()
        };
        let d = make_synthetic(&spec, 6).unwrap();
        for b in 0..10 {
            let (lo, hi) = (b as f64 / 10.0, (b + 1) as f64 / 10.0);
            let sel: Vec<(f64, u8)> = d
                .bayes_probs
                .iter()
                .zip(d.dataset.labels())
                .filter(|(&p, _)| p >= lo && p < hi)
                .map(|(&p, &y)| (p, y))
                .collect();
            if sel.len() < 200 {
                continue;
            }
            let n = sel.len() as f64;
            let mp = sel.iter().map(|s| s.0).sum::<f64>() / n;
            let rate = sel.iter().map(|s| f64::from(s.1)).sum::<f64>() / n;
            let se = (mp * (1.0 - mp) / n).sqrt();
            assert!((rate - mp).abs() < 4.0 * se + 1e-3, "bin {b}: {rate} vs {mp}");
        }
    }

    #[test]
    fn heterogeneous_scaffolds_keep_overall_rate() {
        let spec = SynthSpec {
            n: 10_000,
            active_ratio: 0.08,
            scaffold_heterogeneity: 1.0,
            ..Default::default()
        };
        let d = make_synthetic(&spec, 8).unwrap();
        let r = d.dataset.active_ratio();
        assert!((r - 0.08).abs() < 0.01, "{r}");
        let spread = d.scaffold_rates.iter().cloned().fold(0.0, f64::max)
            - d.scaffold_rates.iter().cloned().fold(1.0, f64::min);
        assert!(spread > 0.1);
        // the Bayes probability of a sample without informative bits is its
        // scaffold's rate
        let m = 2 * spec.informative_bits as u32;
        for (i, v) in d.dataset.vectors().iter().enumerate() {
            if v.indices().iter().all(|&j| j >= m) {
                assert!((d.bayes_probs[i] - d.scaffold_rates[d.scaffold_of[i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SynthSpec {
                overlap: 0.7,
                ..Default::default()
            },
            SynthSpec {
                active_ratio: 1.0,
                ..Default::default()
            },
            SynthSpec {
                scaffold_bits: 600,
                ..Default::default()
            },
        ] {
            assert!(make_synthetic(&spec, 0).is_err());
        }
    }
}
