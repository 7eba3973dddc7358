//! Choosing a labeled partner for every unlabeled image in a mini-batch.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, Normalization};
use crate::error::{ensure, Result};
use crate::network::Network;
use crate::params::ParamStore;
use crate::rng::Rng;

/// Globally pooled encoder features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum PairingStrategy {
    Similar,
    Random,
}

impl PairingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PairingStrategy::Similar => "similar",
            PairingStrategy::Random => "random",
        }
    }
}

/// `pairs[k] = (k, labeled partner of unlabeled sample k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairingAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub strategy: PairingStrategy,
}

impl PairingAssignment {
    pub fn empty(strategy: PairingStrategy) -> Self {
        PairingAssignment {
            pairs: Vec::new(),
            strategy,
        }
    }

    /// Labeled partner of unlabeled index `k`.
    pub fn partner(&self, k: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(u, _)| u == k).map(|&(_, l)| l)
    }

    /// Whether every unlabeled index in `0..n_unlabeled` appears exactly once
    /// and every partner is a valid labeled index.
    pub fn is_total(&self, n_unlabeled: usize, n_labeled: usize) -> bool {
        let mut seen = vec![false; n_unlabeled];
        for &(u, l) in &self.pairs {
            if u >= n_unlabeled || l >= n_labeled || seen[u] {
                return false;
            }
            seen[u] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Pooled encoder features (the classifier's input) for each image.
pub fn pooled_features(
    net: &Network,
    params: &ParamStore,
    norm: &Normalization,
    images: &[ImageSample],
) -> Result<Vec<FeatureVector>> {
    images
        .iter()
        .map(|img| {
            let values = net.pooled(params, &norm.to_input(img))?;
            Ok(FeatureVector {
                id: img.id.clone(),
                values,
            })
        })
        .collect()
}

pub fn euclidean_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    ensure!(
        a.values.len() == b.values.len(),
        Validation,
        "feature dimensions differ: {} vs {}",
        a.values.len(),
        b.values.len()
    );
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Pair each unlabeled feature with its nearest labeled feature.
pub fn pair_similar(labeled: &[FeatureVector], unlabeled: &[FeatureVector]) -> Result<PairingAssignment> {
    ensure!(!labeled.is_empty(), Config, "similar pairing needs at least one labeled sample");
    let pairs = unlabeled
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let d = labeled
                .iter()
                .map(|l| euclidean_distance(l, u))
                .collect::<Result<Vec<_>>>()?;
            Ok((k, argmin(d).expect("labeled pool is non-empty")))
        })
        .collect::<Result<_>>()?;
    Ok(PairingAssignment {
        pairs,
        strategy: PairingStrategy::Similar,
    })
}

/// Pair from a precomputed `unlabeled × labeled` distance matrix.
pub fn pair_from_distances(distances: &[Vec<f64>]) -> Result<PairingAssignment> {
    let pairs = distances
        .iter()
        .enumerate()
        .map(|(k, row)| {
            argmin(row.iter().copied())
                .map(|l| (k, l))
                .ok_or_else(|| crate::Error::Config("distance row is empty".into()))
        })
        .collect::<Result<_>>()?;
    Ok(PairingAssignment {
        pairs,
        strategy: PairingStrategy::Similar,
    })
}

/// Independent uniform choice of a labeled partner per unlabeled index.
pub fn pair_random(n_labeled: usize, n_unlabeled: usize, rng: &mut Rng) -> Result<PairingAssignment> {
    ensure!(n_labeled >= 1, Config, "random pairing needs at least one labeled sample");
    Ok(PairingAssignment {
        pairs: (0..n_unlabeled).map(|k| (k, rng.gen_range(0..n_labeled))).collect(),
        strategy: PairingStrategy::Random,
    })
}

/// Partner for each labeled sample among the other labeled samples of the
/// batch (itself only when the batch holds a single sample).
pub fn pair_labeled_partners(
    labeled: &[FeatureVector],
    strategy: PairingStrategy,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let n = labeled.len();
    ensure!(n >= 1, Config, "labeled partner search needs at least one sample");
    if n == 1 {
        return Ok(vec![0]);
    }
    (0..n)
        .map(|i| match strategy {
            PairingStrategy::Random => {
                let j = rng.gen_range(0..n - 1);
                Ok(if j >= i { j + 1 } else { j })
            }
            PairingStrategy::Similar => {
                let d = (0..n)
                    .map(|j| {
                        if j == i {
                            Ok(f64::INFINITY)
                        } else {
                            euclidean_distance(&labeled[i], &labeled[j])
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(argmin(d).expect("n >= 2"))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;
    use proptest::prelude::*;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector {
            id: String::new(),
            values: values.to_vec(),
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&fv(&[0.0, 0.0]), &fv(&[3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&fv(&[1.5, -2.0]), &fv(&[1.5, -2.0])).unwrap(), 0.0);
        assert!(euclidean_distance(&fv(&[1.0]), &fv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn single_labeled_sample_takes_everything() {
        let p = pair_similar(&[fv(&[1.0])], &[fv(&[5.0]), fv(&[-3.0])]).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (1, 0)]);
        let r = pair_random(1, 3, &mut keyed(0, &[])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 0), (2, 0)]);
    }

    #[test]
    fn identical_feature_wins() {
        let labeled = [fv(&[0.0, 1.0]), fv(&[2.0, 2.0]), fv(&[5.0, 5.0])];
        let p = pair_similar(&labeled, &[fv(&[2.0, 2.0])]).unwrap();
        assert_eq!(p.pairs, vec![(0, 1)]);
    }

    #[test]
    fn distance_matrix_example() {
        // exhaustive argmin over each row, ties to the lowest index
        let d = vec![vec![1.0, 2.0, 3.0], vec![0.5, 4.0, 4.0], vec![9.0, 9.0, 0.1]];
        let oracle: Vec<(usize, usize)> = d
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] < row[best] {
                        best = j;
                    }
                }
                (k, best)
            })
            .collect();
        assert_eq!(oracle, vec![(0, 0), (1, 0), (2, 2)]);
        assert_eq!(pair_from_distances(&d).unwrap().pairs, oracle);
    }

    #[test]
    fn empty_labeled_is_config_error() {
        assert!(matches!(pair_similar(&[], &[fv(&[1.0])]), Err(crate::Error::Config(_))));
        assert!(matches!(pair_random(0, 2, &mut keyed(0, &[])), Err(crate::Error::Config(_))));
    }

    #[test]
    fn random_pairing_is_uniform_and_reproducible() {
        let a = pair_random(4, 100_000, &mut keyed(11, &[])).unwrap();
        let b = pair_random(4, 100_000, &mut keyed(11, &[])).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 4];
        for &(_, l) in &a.pairs {
            counts[l] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01, "frequency {}", c as f64 / 1e5);
        }
    }

    #[test]
    fn labeled_partners_exclude_self() {
        let feats = [fv(&[0.0]), fv(&[0.1]), fv(&[5.0])];
        let p = pair_labeled_partners(&feats, PairingStrategy::Similar, &mut keyed(0, &[])).unwrap();
        assert_eq!(p, vec![1, 0, 1]);
        let r = pair_labeled_partners(&feats, PairingStrategy::Random, &mut keyed(3, &[])).unwrap();
        assert!(r.iter().enumerate().all(|(i, &j)| i != j && j < 3));
        assert_eq!(pair_labeled_partners(&feats[..1], PairingStrategy::Similar, &mut keyed(0, &[])).unwrap(), vec![0]);
    }

    fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, d), n)
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(v in vecs(2, 7)) {
            let (a, b) = (fv(&v[0]), fv(&v[1]));
            // independent two-loop accumulation
            let mut s = 0.0;
            for i in 0..7 { let d = v[1][i] - v[0][i]; s += d * d; }
            let dab = euclidean_distance(&a, &b).unwrap();
            prop_assert!((dab - euclidean_distance(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!((dab - s.sqrt()).abs() <= 1e-12);
        }

        #[test]
        fn scaling_features_keeps_assignment(l in vecs(4, 3), u in vecs(6, 3), c in 0.01f64..100.0) {
            let lf: Vec<_> = l.iter().map(|v| fv(v)).collect();
            let uf: Vec<_> = u.iter().map(|v| fv(v)).collect();
            let ls: Vec<_> = l.iter().map(|v| fv(&v.iter().map(|x| x * c).collect::<Vec<_>>())).collect();
            let us: Vec<_> = u.iter().map(|v| fv(&v.iter().map(|x| x * c).collect::<Vec<_>>())).collect();
            let a = pair_similar(&lf, &uf).unwrap();
            prop_assert!(a.is_total(6, 4));
            prop_assert_eq!(a, pair_similar(&ls, &us).unwrap());
            let d0 = euclidean_distance(&lf[0], &uf[0]).unwrap();
            let d1 = euclidean_distance(&ls[0], &us[0]).unwrap();
            prop_assert!((d1 - c * d0).abs() <= 1e-9 * (1.0 + d1));
        }

        #[test]
        fn monotone_distance_transform_keeps_assignment(d in vecs(5, 4)) {
            let d: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|x| x.abs()).collect()).collect();
            let squashed: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|x| x.exp() * 3.0 + 1.0).collect()).collect();
            prop_assert_eq!(pair_from_distances(&d).unwrap(), pair_from_distances(&squashed).unwrap());
        }
    }
}
