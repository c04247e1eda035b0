//! Similarity-aware fold assignment: sphere-exclusion clustering on Tanimoto
//! similarity, then whole clusters distributed over folds.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{check_two_classes, LabeledDataset, SparseBinaryVector, Split};
use crate::error::{Error, Result};
use crate::seed;

/// Default similarity threshold for clustering.
pub const DEFAULT_THRESHOLD: f64 = 0.6;

/// `|A ∩ B| / |A ∪ B|`. Two empty fingerprints have similarity 1.
pub fn tanimoto(a: &SparseBinaryVector, b: &SparseBinaryVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(tanimoto_unchecked(a.indices(), b.indices()))
}

fn tanimoto_unchecked(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    common as f64 / (a.len() + b.len() - common) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster id of every sample; ids number clusters in creation order.
    pub cluster_of: Vec<usize>,
    /// Sample index of each cluster's leader.
    pub leaders: Vec<usize>,
    pub threshold: f64,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.leaders.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.leaders.len()];
        for &c in &self.cluster_of {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Sphere-exclusion clustering. Samples are visited in a seeded random
/// order; an unassigned sample becomes a leader and claims every unassigned
/// sample whose similarity to it is at least `threshold`.
pub fn leader_cluster(ds: &LabeledDataset, threshold: f64, seed: u64) -> Result<ClusterAssignment> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} not in (0, 1]"
        )));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));

    const UNASSIGNED: usize = usize::MAX;
    let mut cluster_of = vec![UNASSIGNED; n];
    let mut leaders = Vec::new();
    let mut remaining: Vec<usize> = order.clone();
    for &leader in &order {
        if cluster_of[leader] != UNASSIGNED {
            continue;
        }
        let c = leaders.len();
        leaders.push(leader);
        cluster_of[leader] = c;
        let lv = ds.vector(leader).indices();
        let claimed: Vec<usize> = remaining
            .par_iter()
            .copied()
            .filter(|&j| {
                cluster_of[j] == UNASSIGNED
                    && tanimoto_unchecked(lv, ds.vector(j).indices()) >= threshold
            })
            .collect();
        for j in claimed {
            cluster_of[j] = c;
        }
        remaining.retain(|&j| cluster_of[j] == UNASSIGNED);
    }
    Ok(ClusterAssignment {
        cluster_of,
        leaders,
        threshold,
    })
}

/// Distributes whole clusters over `k` folds. Clusters are taken in
/// descending size order (equal sizes in seeded random order) and each goes
/// to the currently smallest fold, ties broken at random.
pub fn assign_folds(clusters: &ClusterAssignment, k: usize, seed: u64) -> Result<Vec<u8>> {
    if k < 2 || k > u8::MAX as usize + 1 {
        return Err(Error::InvalidParameter(format!("fold count {k} not in 2..=256")));
    }
    let m = clusters.num_clusters();
    if m < k {
        return Err(Error::TooFewClusters { clusters: m, folds: k });
    }
    let mut rng = seed::rng(seed);
    let sizes = clusters.sizes();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));

    let mut fold_size = vec![0usize; k];
    let mut fold_of_cluster = vec![0u8; m];
    let mut smallest = Vec::with_capacity(k);
    for c in order {
        let min = *fold_size.iter().min().expect("k >= 2");
        smallest.clear();
        smallest.extend((0..k).filter(|&f| fold_size[f] == min));
        let f = smallest[rng.random_range(0..smallest.len())];
        fold_size[f] += sizes[c];
        fold_of_cluster[c] = f as u8;
    }
    Ok(clusters
        .cluster_of
        .iter()
        .map(|&c| fold_of_cluster[c])
        .collect())
}

/// Test fold, validation fold, and the remaining folds as training data.
pub fn make_split(ds: &LabeledDataset, test_fold: u8, val_fold: u8) -> Result<Split> {
    let folds = ds
        .folds()
        .ok_or_else(|| Error::InvalidData("dataset has no fold assignment".into()))?;
    if test_fold == val_fold {
        return Err(Error::InvalidParameter(
            "test and validation folds must differ".into(),
        ));
    }
    if test_fold > 4 || val_fold > 4 {
        return Err(Error::InvalidParameter("fold indices must be in 0..=4".into()));
    }
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, &f) in folds.iter().enumerate() {
        if f == test_fold {
            split.test.push(i);
        } else if f == val_fold {
            split.validation.push(i);
        } else {
            split.train.push(i);
        }
    }
    check_two_classes(ds, &split.test, "test")?;
    check_two_classes(ds, &split.validation, "validation")?;
    check_two_classes(ds, &split.train, "train")?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(dim: usize, idx: &[u32]) -> SparseBinaryVector {
        SparseBinaryVector::new(dim, idx.to_vec()).unwrap()
    }

    fn dataset(vectors: Vec<SparseBinaryVector>) -> LabeledDataset {
        let n = vectors.len();
        let dim = vectors[0].dim();
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        let ids = (0..n).map(|i| format!("m{i}")).collect();
        LabeledDataset::new(dim, vectors, labels, ids).unwrap()
    }

    fn random_dataset(n: usize, dim: u32, bits: usize, seed: u64) -> LabeledDataset {
        use rand::Rng;
        let mut rng = seed::rng(seed);
        let vectors = (0..n)
            .map(|_| {
                let idx = (0..bits).map(|_| rng.random_range(0..dim)).collect();
                SparseBinaryVector::from_unsorted(dim as usize, idx).unwrap()
            })
            .collect();
        dataset(vectors)
    }

    #[test]
    fn tanimoto_examples() {
        assert_eq!(tanimoto(&v(8, &[1, 2, 3]), &v(8, &[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(tanimoto(&v(8, &[1, 2]), &v(8, &[3, 4])).unwrap(), 0.0);
        assert_eq!(tanimoto(&v(8, &[1, 2, 3]), &v(8, &[2, 3, 4])).unwrap(), 0.5);
        assert_eq!(tanimoto(&v(8, &[]), &v(8, &[])).unwrap(), 1.0);
        assert_eq!(tanimoto(&v(8, &[]), &v(8, &[1])).unwrap(), 0.0);
        assert!(tanimoto(&v(8, &[1]), &v(9, &[1])).is_err());
    }

    #[test]
    fn identical_vectors_form_one_cluster() {
        let ds = dataset(vec![v(16, &[1, 5, 9]); 10]);
        for t in [0.1, 0.6, 1.0] {
            let c = leader_cluster(&ds, t, 3).unwrap();
            assert_eq!(c.num_clusters(), 1);
        }
    }

    #[test]
    fn disjoint_vectors_are_singletons() {
        let ds = dataset((0..12).map(|i| v(64, &[2 * i, 2 * i + 1])).collect());
        let c = leader_cluster(&ds, 0.5, 1).unwrap();
        assert_eq!(c.num_clusters(), 12);
    }

    #[test]
    fn clustering_is_deterministic_and_respects_threshold() {
        let ds = random_dataset(100, 40, 6, 11);
        let a = leader_cluster(&ds, 0.3, 5).unwrap();
        let b = leader_cluster(&ds, 0.3, 5).unwrap();
        assert_eq!(a, b);
        for (i, &c) in a.cluster_of.iter().enumerate() {
            let leader = a.leaders[c];
            assert_eq!(a.cluster_of[leader], c);
            assert!(tanimoto(ds.vector(i), ds.vector(leader)).unwrap() >= 0.3);
        }
    }

    #[test]
    fn rejects_bad_threshold() {
        let ds = random_dataset(4, 10, 2, 0);
        assert!(leader_cluster(&ds, 0.0, 0).is_err());
        assert!(leader_cluster(&ds, 1.5, 0).is_err());
    }

    fn clusters_from_sizes(sizes: &[usize]) -> ClusterAssignment {
        let mut cluster_of = Vec::new();
        let mut leaders = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            leaders.push(cluster_of.len());
            cluster_of.extend(std::iter::repeat_n(c, s));
        }
        ClusterAssignment {
            cluster_of,
            leaders,
            threshold: 0.6,
        }
    }

    fn fold_sizes(folds: &[u8], k: usize) -> Vec<usize> {
        let mut s = vec![0; k];
        for &f in folds {
            s[f as usize] += 1;
        }
        s
    }

    #[test]
    fn singleton_clusters_fill_each_fold_once() {
        let folds = assign_folds(&clusters_from_sizes(&[1; 5]), 5, 9).unwrap();
        assert_eq!(fold_sizes(&folds, 5), vec![1; 5]);
    }

    #[test]
    fn giant_cluster_sits_alone() {
        let c = clusters_from_sizes(&[50, 1, 1, 1, 1]);
        let folds = assign_folds(&c, 5, 2).unwrap();
        let giant = folds[0];
        assert!(folds[..50].iter().all(|&f| f == giant));
        assert!(folds[50..].iter().all(|&f| f != giant));
    }

    #[test]
    fn too_few_clusters() {
        let e = assign_folds(&clusters_from_sizes(&[3, 3]), 5, 0).unwrap_err();
        assert!(matches!(e, Error::TooFewClusters { clusters: 2, folds: 5 }));
    }

    #[test]
    fn greedy_balance_over_seeds() {
        use rand::Rng;
        for s in 0..20u64 {
            let mut rng = seed::rng(1000 + s);
            let sizes: Vec<usize> = (0..200).map(|_| rng.random_range(1..=20)).collect();
            let folds = assign_folds(&clusters_from_sizes(&sizes), 5, s).unwrap();
            let fs = fold_sizes(&folds, 5);
            let (mx, mn) = (*fs.iter().max().unwrap(), *fs.iter().min().unwrap());
            assert!(mx as f64 / mn as f64 <= 1.5, "seed {s}: {fs:?}");
        }
    }

    #[test]
    fn split_from_equal_folds() {
        let ds = random_dataset(50, 30, 4, 7)
            .with_folds((0..50).map(|i| (i % 5) as u8).collect())
            .unwrap();
        let split = make_split(&ds, 0, 1).unwrap();
        assert_eq!(split.train.len(), 30);
        split.validate(&ds).unwrap();
        assert!(make_split(&ds, 2, 2).is_err());
    }

    #[test]
    fn single_class_test_fold_is_rejected() {
        // every negative lands in fold 0
        let ds = random_dataset(20, 30, 4, 7)
            .with_folds((0..20).map(|i| if i % 2 == 0 { 0 } else { 1 + (i / 2 % 4) as u8 }).collect())
            .unwrap();
        let e = make_split(&ds, 0, 1).unwrap_err();
        assert!(matches!(e, Error::SingleClass(_)), "{e}");
    }

    fn arb_set() -> impl Strategy<Value = SparseBinaryVector> {
        proptest::collection::btree_set(0u32..24, 0..10)
            .prop_map(|s| SparseBinaryVector::new(24, s.into_iter().collect()).unwrap())
    }

    proptest! {
        #[test]
        fn tanimoto_is_symmetric_metric(a in arb_set(), b in arb_set(), c in arb_set()) {
            let ab = tanimoto(&a, &b).unwrap();
            prop_assert_eq!(ab, tanimoto(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() || !b.is_empty() {
                prop_assert_eq!(ab == 1.0, a == b);
            }
            let d = |x: &SparseBinaryVector, y: &SparseBinaryVector| 1.0 - tanimoto(x, y).unwrap();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }

        #[test]
        fn clusters_never_span_folds(seed in 0u64..1000) {
            let ds = random_dataset(60, 30, 5, seed);
            let c = leader_cluster(&ds, 0.25, seed).unwrap();
            prop_assume!(c.num_clusters() >= 5);
            let folds = assign_folds(&c, 5, seed).unwrap();
            prop_assert_eq!(folds.len(), ds.len());
            for (i, &cl) in c.cluster_of.iter().enumerate() {
                prop_assert_eq!(folds[i], folds[c.leaders[cl]]);
            }
        }
    }
}
