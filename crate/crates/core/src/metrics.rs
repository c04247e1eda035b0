//! Evaluation metrics over a [`PredictionSet`]: BCE, Brier score, binned
//! calibration errors (ECE with equal-width bins, ACE with equal-count bins),
//! ROC AUC, accuracy and the Murphy decomposition of the Brier score.

use std::cmp::Ordering;

use crate::data::PredictionSet;
use crate::error::{Error, Result};
use crate::scalar::{running_mean, Scalar};

/// Bin count used when none is configured.
pub const DEFAULT_BINS: usize = 10;

/// Probability clamp applied before the logarithms of the BCE.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinScheme {
    /// Bins of width `1/B` over `[0, 1]`; gives the ECE.
    EqualWidth,
    /// Bins holding (nearly) the same number of predictions; gives the ACE.
    EqualCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bin<T> {
    /// Lower edge. For equal-count bins, the smallest member probability.
    pub lo: T,
    /// Upper edge. For equal-count bins, the largest member probability.
    pub hi: T,
    pub count: usize,
    /// Mean predicted probability of the members (zero when empty).
    pub confidence: T,
    /// Fraction of positive members (zero when empty).
    pub accuracy: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCalibration<T> {
    pub scheme: BinScheme,
    pub bins: Vec<Bin<T>>,
}

impl<T: Scalar> BinnedCalibration<T> {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `(1/N) Σ n_b |acc(b) - conf(b)|`.
    pub fn error(&self) -> T {
        let n = self.total();
        if n == 0 {
            return T::zero();
        }
        let sum: T = self
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| T::of_usize(b.count) * (b.accuracy - b.confidence).abs())
            .sum();
        sum / T::of_usize(n)
    }
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(p: &PredictionSet<T>) -> T {
    if p.is_empty() {
        return T::zero();
    }
    let lo = T::of(BCE_CLAMP);
    let hi = T::one() - lo;
    let sum: T = p
        .probs()
        .iter()
        .zip(p.labels())
        .map(|(&q, &y)| {
            let q = q.max(lo).min(hi);
            if y == 1 {
                -q.ln()
            } else {
                -(T::one() - q).ln()
            }
        })
        .sum();
    sum / T::of_usize(p.len())
}

/// `(1/N) Σ (p_i - y_i)^2`.
pub fn brier<T: Scalar>(p: &PredictionSet<T>) -> T {
    if p.is_empty() {
        return T::zero();
    }
    let sum: T = p
        .probs()
        .iter()
        .zip(p.labels())
        .map(|(&q, &y)| {
            let d = q - T::of(f64::from(y));
            d * d
        })
        .sum();
    sum / T::of_usize(p.len())
}

/// Fraction of samples whose thresholded prediction (`p >= threshold` is
/// positive) matches the label.
pub fn accuracy<T: Scalar>(p: &PredictionSet<T>, threshold: T) -> T {
    if p.is_empty() {
        return T::zero();
    }
    let hits = p
        .probs()
        .iter()
        .zip(p.labels())
        .filter(|(&q, &y)| (q >= threshold) == (y == 1))
        .count();
    T::of_usize(hits) / T::of_usize(p.len())
}

/// Orders samples by probability, then by logit. The logit only matters when
/// probabilities saturate to the same floating-point value.
fn score_cmp<T: Scalar>(p: &PredictionSet<T>, a: usize, b: usize) -> Ordering {
    let (pr, lg) = (p.probs(), p.logits());
    pr[a]
        .partial_cmp(&pr[b])
        .unwrap_or(Ordering::Equal)
        .then_with(|| lg[a].partial_cmp(&lg[b]).unwrap_or(Ordering::Equal))
}

fn sorted_order<T: Scalar>(p: &PredictionSet<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| score_cmp(p, a, b));
    order
}

/// Area under the ROC curve via the Mann-Whitney rank-sum statistic, ties
/// counted as one half.
pub fn auc<T: Scalar>(p: &PredictionSet<T>) -> Result<T> {
    let n_pos = p.positives();
    let n_neg = p.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("AUC input".into()));
    }
    let order = sorted_order(p);
    // Twice the rank sum of positives, kept integral so tie midranks are exact.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && score_cmp(p, order[start], order[end]) == Ordering::Equal {
            end += 1;
        }
        // ranks start+1 ..= end, midrank (start + 1 + end) / 2
        let pos_in_group = order[start..end]
            .iter()
            .filter(|&&i| p.labels()[i] == 1)
            .count() as u128;
        twice_rank_sum += pos_in_group * (start as u128 + 1 + end as u128);
        start = end;
    }
    let n_pos_u = n_pos as u128;
    let twice_u = twice_rank_sum - n_pos_u * (n_pos_u + 1);
    let pairs = (n_pos as u128) * (n_neg as u128);
    Ok(T::of(twice_u as f64) / T::of((2 * pairs) as f64))
}

/// Equal-width bin of `q` under the `[lo, hi)` convention, last bin closed.
fn width_bin<T: Scalar>(q: T, bins: usize) -> usize {
    let b = T::of_usize(bins);
    let edge = |k: usize| T::of_usize(k) / b;
    let mut idx = (q * b).floor().to_usize().unwrap_or(0).min(bins - 1);
    while idx > 0 && q < edge(idx) {
        idx -= 1;
    }
    while idx + 1 < bins && q >= edge(idx + 1) {
        idx += 1;
    }
    idx
}

fn summarize<T: Scalar>(p: &PredictionSet<T>, members: &[usize], lo: T, hi: T) -> Bin<T> {
    if members.is_empty() {
        return Bin {
            lo,
            hi,
            count: 0,
            confidence: T::zero(),
            accuracy: T::zero(),
        };
    }
    let positives = members.iter().filter(|&&i| p.labels()[i] == 1).count();
    Bin {
        lo,
        hi,
        count: members.len(),
        confidence: running_mean(members.iter().map(|&i| p.probs()[i])),
        accuracy: T::of_usize(positives) / T::of_usize(members.len()),
    }
}

/// Groups samples into bins under the given scheme.
///
/// Equal-count bins follow the sorted order: the sample at rank `r` goes to
/// bin `floor(r * B / N)`, and a group of tied scores goes to the bin of its
/// first member so ties are never split.
pub fn bin_predictions<T: Scalar>(
    p: &PredictionSet<T>,
    scheme: BinScheme,
    bins: usize,
) -> Result<BinnedCalibration<T>> {
    if bins == 0 {
        return Err(Error::InvalidParameter("bin count must be positive".into()));
    }
    let n = p.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    match scheme {
        BinScheme::EqualWidth => {
            for (i, &q) in p.probs().iter().enumerate() {
                members[width_bin(q, bins)].push(i);
            }
            let b = T::of_usize(bins);
            let bins = members
                .iter()
                .enumerate()
                .map(|(k, m)| summarize(p, m, T::of_usize(k) / b, T::of_usize(k + 1) / b))
                .collect();
            Ok(BinnedCalibration { scheme, bins })
        }
        BinScheme::EqualCount => {
            let order = sorted_order(p);
            let probs = p.probs();
            let mut start = 0;
            while start < n {
                let mut end = start + 1;
                while end < n && probs[order[end]] == probs[order[start]] {
                    end += 1;
                }
                let bin = start * bins / n;
                members[bin].extend_from_slice(&order[start..end]);
                start = end;
            }
            let bins = members
                .iter()
                .map(|m| {
                    let lo = m.iter().map(|&i| probs[i]).fold(T::infinity(), T::min);
                    let hi = m.iter().map(|&i| probs[i]).fold(T::neg_infinity(), T::max);
                    if m.is_empty() {
                        summarize(p, m, T::zero(), T::zero())
                    } else {
                        summarize(p, m, lo, hi)
                    }
                })
                .collect();
            Ok(BinnedCalibration { scheme, bins })
        }
    }
}

/// Binned calibration error `(1/N) Σ n_b |acc(b) - conf(b)|` together with
/// the bins. Equal-width bins give the ECE, equal-count bins the ACE.
pub fn calibration_error<T: Scalar>(
    p: &PredictionSet<T>,
    scheme: BinScheme,
    bins: usize,
) -> Result<(T, BinnedCalibration<T>)> {
    if p.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let binned = bin_predictions(p, scheme, bins)?;
    Ok((binned.error(), binned))
}

pub fn ece<T: Scalar>(p: &PredictionSet<T>, bins: usize) -> Result<T> {
    calibration_error(p, BinScheme::EqualWidth, bins).map(|(e, _)| e)
}

pub fn ace<T: Scalar>(p: &PredictionSet<T>, bins: usize) -> Result<T> {
    calibration_error(p, BinScheme::EqualCount, bins).map(|(e, _)| e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrierDecomposition<T> {
    pub reliability: T,
    pub resolution: T,
    pub uncertainty: T,
}

impl<T: Scalar> BrierDecomposition<T> {
    /// `reliability - resolution + uncertainty`.
    pub fn brier(&self) -> T {
        self.reliability - self.resolution + self.uncertainty
    }
}

/// Murphy decomposition of the Brier score of the equal-width-binned
/// forecasts (each prediction replaced by its bin's mean confidence).
pub fn brier_decomposition<T: Scalar>(
    p: &PredictionSet<T>,
    bins: usize,
) -> Result<BrierDecomposition<T>> {
    if p.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let binned = bin_predictions(p, BinScheme::EqualWidth, bins)?;
    let n = T::of_usize(p.len());
    let base = p.base_rate();
    let mut reliability = T::zero();
    let mut resolution = T::zero();
    for b in binned.bins.iter().filter(|b| b.count > 0) {
        let w = T::of_usize(b.count);
        let gap = b.confidence - b.accuracy;
        let spread = b.accuracy - base;
        reliability = reliability + w * gap * gap;
        resolution = resolution + w * spread * spread;
    }
    Ok(BrierDecomposition {
        reliability: reliability / n,
        resolution: resolution / n,
        uncertainty: base * (T::one() - base),
    })
}

/// Brier score of the forecasts after replacing each prediction by its
/// equal-width bin's mean confidence.
pub fn binned_brier<T: Scalar>(p: &PredictionSet<T>, bins: usize) -> Result<T> {
    let binned = bin_predictions(p, BinScheme::EqualWidth, bins)?;
    let mut sum = T::zero();
    for (i, &q) in p.probs().iter().enumerate() {
        let f = binned.bins[width_bin(q, bins)].confidence;
        let d = f - T::of(f64::from(p.labels()[i]));
        sum = sum + d * d;
    }
    Ok(sum / T::of_usize(p.len()))
}

/// All summary metrics of one prediction set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub ece: f64,
    pub ace: f64,
    pub brier: f64,
    pub bce: f64,
    pub auc: f64,
    pub accuracy: f64,
}

pub fn summarize_predictions<T: Scalar>(p: &PredictionSet<T>, bins: usize) -> Result<MetricSummary> {
    Ok(MetricSummary {
        ece: ece(p, bins)?.f64(),
        ace: ace(p, bins)?.f64(),
        brier: brier(p).f64(),
        bce: bce_loss(p).f64(),
        auc: auc(p)?.f64(),
        accuracy: accuracy(p, T::of(0.5)).f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preds(probs: &[f64], labels: &[u8]) -> PredictionSet<f64> {
        PredictionSet::from_probs(probs.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&preds(&[1.0, 0.0, 1.0], &[1, 0, 1])) <= 1e-6);
        assert!((bce_loss(&preds(&[0.5; 4], &[1, 0, 0, 1])) - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&preds(&[0.8, 0.4], &[1, 0]));
        assert!((v - 0.366_985).abs() < 1e-6, "{v}");
        assert!((v - (-(0.8f64).ln() - (0.6f64).ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&preds(&[1.0, 0.0], &[1, 0])), 0.0);
        assert_eq!(brier(&preds(&[0.5; 3], &[1, 0, 0])), 0.25);
        assert!((brier(&preds(&[0.8, 0.4], &[1, 0])) - 0.10).abs() < 1e-15);
    }

    #[test]
    fn ece_hand_binned() {
        let p = preds(&[0.2, 0.2, 0.8, 0.8], &[0, 1, 1, 1]);
        let (e, b) = calibration_error(&p, BinScheme::EqualWidth, 2).unwrap();
        assert!((e - 0.25).abs() < 1e-15, "{e}");
        assert_eq!(b.bins[0].count, 2);
        assert_eq!(b.bins[1].count, 2);
    }

    #[test]
    fn constant_base_rate_is_perfectly_calibrated() {
        let labels = [1u8, 0, 0, 1, 0, 0, 0, 1, 0, 0];
        let rate = 3.0 / 10.0;
        let p = preds(&[rate; 10], &labels);
        for bins in [1, 2, 7, 10, 50] {
            assert_eq!(ece(&p, bins).unwrap(), 0.0);
            assert_eq!(ace(&p, bins).unwrap(), 0.0);
        }
    }

    #[test]
    fn exact_predictions_have_zero_error() {
        let p = preds(&[1.0, 0.0, 0.0, 1.0], &[1, 0, 0, 1]);
        for bins in [1, 3, 10] {
            assert_eq!(ece(&p, bins).unwrap(), 0.0);
            assert_eq!(ace(&p, bins).unwrap(), 0.0);
        }
    }

    #[test]
    fn equal_width_edges_are_half_open() {
        assert_eq!(width_bin(0.1f64, 10), 1);
        assert_eq!(width_bin(0.3f64, 10), 3);
        assert_eq!(width_bin(0.7f64, 10), 7);
        assert_eq!(width_bin(1.0f64, 10), 9);
        assert_eq!(width_bin(0.0f64, 10), 0);
        assert_eq!(width_bin(0.5f64, 2), 1);
    }

    #[test]
    fn equal_count_keeps_ties_together() {
        let p = preds(&[0.1, 0.3, 0.3, 0.3, 0.9, 0.95], &[0, 1, 0, 0, 1, 1]);
        let b = bin_predictions(&p, BinScheme::EqualCount, 3).unwrap();
        let counts: Vec<usize> = b.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![4, 0, 2]);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&preds(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc(&preds(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 0, 1])).unwrap(), 0.75);
        assert_eq!(auc(&preds(&[0.4; 5], &[1, 0, 1, 0, 0])).unwrap(), 0.5);
        assert!(matches!(auc(&preds(&[0.4, 0.6], &[1, 1])), Err(Error::SingleClass(_))));
    }

    #[test]
    fn auc_uses_logits_when_probabilities_saturate() {
        let p = PredictionSet::<f64>::from_logits(vec![40.0, 45.0, 50.0], vec![0, 1, 1]).unwrap();
        assert_eq!(p.probs()[0], p.probs()[2]);
        assert_eq!(auc(&p).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&preds(&[0.9, 0.1], &[1, 0]), 0.5), 1.0);
        assert_eq!(accuracy(&preds(&[0.1, 0.9], &[1, 0]), 0.5), 0.0);
        let a = accuracy(&preds(&[0.6, 0.4, 0.5], &[1, 1, 1]), 0.5);
        assert!((a - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn decomposition_analytic_cases() {
        let labels = [1u8, 0, 0, 0];
        let d = brier_decomposition(&preds(&[0.25; 4], &labels), 10).unwrap();
        assert_eq!(d.reliability, 0.0);
        assert_eq!(d.resolution, 0.0);
        assert_eq!(d.uncertainty, 0.25 * 0.75);

        let d = brier_decomposition(&preds(&[1.0, 0.0, 0.0, 0.0], &labels), 10).unwrap();
        assert_eq!(d.reliability, 0.0);
        assert!((d.resolution - d.uncertainty).abs() < 1e-15);
    }

    #[test]
    fn decomposition_identity_random() {
        use rand::Rng;
        let mut rng = crate::seed::rng(5);
        let probs: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let labels: Vec<u8> = probs.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
        let p = preds(&probs, &labels);
        let d = brier_decomposition(&p, 10).unwrap();
        assert!((d.brier() - binned_brier(&p, 10).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn works_in_f32() {
        let p = PredictionSet::<f32>::from_probs(vec![0.2, 0.2, 0.8, 0.8], vec![0, 1, 1, 1]).unwrap();
        assert!((ece(&p, 2).unwrap() - 0.25).abs() < 1e-6);
        assert!((auc(&p).unwrap() - 2.5 / 3.0).abs() < 1e-6);
    }

    fn arb_preds() -> impl Strategy<Value = PredictionSet<f64>> {
        proptest::collection::vec((0.0f64..1.0, 0u8..2), 2..120).prop_filter_map("two classes", |rows| {
            let (p, y): (Vec<f64>, Vec<u8>) = rows.into_iter().unzip();
            let pos = y.iter().filter(|&&v| v == 1).count();
            (pos > 0 && pos < y.len()).then(|| PredictionSet::from_probs(p, y).unwrap())
        })
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(p in arb_preds(), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let mut rows: Vec<usize> = (0..p.len()).collect();
            rows.shuffle(&mut crate::seed::rng(seed));
            let q = p.select(&rows);
            prop_assert_eq!(auc(&p).unwrap(), auc(&q).unwrap());
            prop_assert!((ece(&p, 10).unwrap() - ece(&q, 10).unwrap()).abs() < 1e-12);
            prop_assert!((ace(&p, 10).unwrap() - ace(&q, 10).unwrap()).abs() < 1e-12);
            prop_assert!((brier(&p) - brier(&q)).abs() < 1e-12);
            prop_assert!((bce_loss(&p) - bce_loss(&q)).abs() < 1e-12);
            prop_assert_eq!(accuracy(&p, 0.5), accuracy(&q, 0.5));
        }

        #[test]
        fn auc_invariant_to_increasing_transform(p in arb_preds()) {
            let q = PredictionSet::from_probs(
                p.probs().iter().map(|&x| x * x * 0.5 + 0.1).collect(),
                p.labels().to_vec(),
            ).unwrap();
            prop_assert_eq!(auc(&p).unwrap(), auc(&q).unwrap());
        }

        #[test]
        fn bounded_metrics(p in arb_preds(), bins in 1usize..20) {
            let e = ece(&p, bins).unwrap();
            let a = ace(&p, bins).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((0.0..=1.0).contains(&brier(&p)));
            let b = bin_predictions(&p, BinScheme::EqualCount, bins).unwrap();
            prop_assert_eq!(b.total(), p.len());
            let occupied: Vec<usize> = b.bins.iter().map(|b| b.count).filter(|&c| c > 0).collect();
            let distinct = {
                let mut v = p.probs().to_vec();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v.dedup();
                v.len()
            };
            if distinct == p.len() {
                let mx = occupied.iter().max().unwrap();
                let mn = occupied.iter().min().unwrap();
                prop_assert!(mx - mn <= 1);
            }
        }
    }
}
