use rand::seq::SliceRandom;

use super::{augment, AugmentPolicy, DatasetSplit, ImageSample, LabelMask};
use crate::error::{ensure, Result};
use crate::pairing::PairingAssignment;
use crate::rng::{keyed, stream, Rng};

/// One mini-batch of augmented labeled and unlabeled samples.
#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub iteration: u64,
    pub labeled: Vec<(ImageSample, LabelMask)>,
    pub unlabeled: Vec<ImageSample>,
    /// Labeled partner of every unlabeled sample.
    pub pairing: PairingAssignment,
}

const LABELED_POOL: u64 = 0;
const UNLABELED_POOL: u64 = 1;

/// Visits a pool in a fresh seeded permutation per pass, so a smaller pool
/// is cycled (re-sampled) more often than a larger one.
#[derive(Debug)]
struct PoolOrder {
    seed: u64,
    pool: u64,
    len: usize,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl PoolOrder {
    fn new(seed: u64, pool: u64, len: usize) -> Self {
        PoolOrder {
            seed,
            pool,
            len,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn index(&mut self, draw: u64) -> usize {
        let epoch = draw / self.len as u64;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.len).collect();
            self.perm
                .shuffle(&mut keyed(self.seed, &[stream::EPOCH_ORDER, self.pool, epoch]));
            self.epoch = Some(epoch);
        }
        self.perm[(draw % self.len as u64) as usize]
    }
}

/// Endless, iteration-indexed stream of [`PairedBatch`]es.
///
/// Sample choice and augmentation for slot `i` of iteration `t` depend only on
/// `(seed, pool, t, i)`, so labeled batches are identical whether or not the
/// split has unlabeled data.
pub struct BatchStream<'a, F> {
    split: &'a DatasetSplit,
    batch_size: usize,
    policy: AugmentPolicy,
    seed: u64,
    iteration: u64,
    labeled_order: PoolOrder,
    unlabeled_order: Option<PoolOrder>,
    pairing_fn: F,
}

pub fn make_batches<F>(
    split: &DatasetSplit,
    batch_size: usize,
    policy: AugmentPolicy,
    seed: u64,
    pairing_fn: F,
) -> Result<BatchStream<'_, F>>
where
    F: FnMut(&[(ImageSample, LabelMask)], &[ImageSample], &mut Rng) -> Result<PairingAssignment>,
{
    ensure!(batch_size >= 1, Config, "batch_size must be at least 1");
    ensure!(!split.labeled.is_empty(), Config, "the labeled pool is empty");
    policy.validate()?;
    Ok(BatchStream {
        split,
        batch_size,
        policy,
        seed,
        iteration: 0,
        labeled_order: PoolOrder::new(seed, LABELED_POOL, split.labeled.len()),
        unlabeled_order: (!split.unlabeled.is_empty())
            .then(|| PoolOrder::new(seed, UNLABELED_POOL, split.unlabeled.len())),
        pairing_fn,
    })
}

impl<F> BatchStream<'_, F>
where
    F: FnMut(&[(ImageSample, LabelMask)], &[ImageSample], &mut Rng) -> Result<PairingAssignment>,
{
    /// Jump to iteration `t` (for resuming).
    pub fn seek(&mut self, t: u64) {
        self.iteration = t;
    }

    fn build(&mut self) -> Result<PairedBatch> {
        let t = self.iteration;
        let c = self.split.num_classes();
        let mut labeled = Vec::with_capacity(self.batch_size);
        for i in 0..self.batch_size {
            let idx = self.labeled_order.index(t * self.batch_size as u64 + i as u64);
            let (img, mask) = self.split.labeled[idx].labeled(c)?;
            let mut rng = keyed(self.seed, &[stream::AUGMENT, LABELED_POOL, t, i as u64]);
            let (img, mask) = augment(&img, Some(&mask), &self.policy, &mut rng);
            labeled.push((img, mask.expect("mask passed through")));
        }
        let mut unlabeled = Vec::new();
        if let Some(order) = &mut self.unlabeled_order {
            for i in 0..self.batch_size {
                let idx = order.index(t * self.batch_size as u64 + i as u64);
                let img = self.split.unlabeled[idx].image()?;
                let mut rng = keyed(self.seed, &[stream::AUGMENT, UNLABELED_POOL, t, i as u64]);
                unlabeled.push(augment(&img, None, &self.policy, &mut rng).0);
            }
        }
        let mut rng = keyed(self.seed, &[stream::PAIRING, t]);
        let pairing = (self.pairing_fn)(&labeled, &unlabeled, &mut rng)?;
        ensure!(
            pairing.is_total(unlabeled.len(), labeled.len()),
            Validation,
            "pairing must assign every unlabeled sample exactly once"
        );
        Ok(PairedBatch {
            iteration: t,
            labeled,
            unlabeled,
            pairing,
        })
    }
}

impl<F> Iterator for BatchStream<'_, F>
where
    F: FnMut(&[(ImageSample, LabelMask)], &[ImageSample], &mut Rng) -> Result<PairingAssignment>,
{
    type Item = Result<PairedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let batch = self.build();
        self.iteration += 1;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::pairing::pair_random;

    fn split(n_labeled: usize, n_unlabeled: usize) -> DatasetSplit {
        let spec = SyntheticSpec::new(n_labeled + n_unlabeled, 16, 4, 5);
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for i in 0..n_labeled + n_unlabeled {
            let (_, img, mask) = spec.sample(i);
            if i < n_labeled {
                labeled.push((img, mask));
            } else {
                unlabeled.push(img);
            }
        }
        DatasetSplit::from_memory(labeled, unlabeled, spec.class_names()).unwrap()
    }

    fn random_pairs(l: &[(ImageSample, LabelMask)], u: &[ImageSample], rng: &mut Rng) -> Result<PairingAssignment> {
        pair_random(l.len(), u.len(), rng)
    }

    #[test]
    fn batch_of_twelve_has_twelve_pairs() {
        let s = split(3, 20);
        let mut stream = make_batches(&s, 12, AugmentPolicy::crop_only(16), 1, random_pairs).unwrap();
        let b = stream.next().unwrap().unwrap();
        assert_eq!(b.labeled.len(), 12);
        assert_eq!(b.unlabeled.len(), 12);
        assert_eq!(b.pairing.pairs.len(), 12);
    }

    #[test]
    fn supervised_only_batches_have_empty_pairing() {
        let s = split(4, 0);
        let mut stream = make_batches(&s, 3, AugmentPolicy::crop_only(16), 1, random_pairs).unwrap();
        let b = stream.next().unwrap().unwrap();
        assert!(b.unlabeled.is_empty());
        assert!(b.pairing.pairs.is_empty());
    }

    #[test]
    fn first_batch_is_reproducible() {
        let s = split(5, 7);
        let ids = |seed| {
            let mut st = make_batches(&s, 4, AugmentPolicy { crop_size: 12, ..Default::default() }, seed, random_pairs).unwrap();
            let b = st.next().unwrap().unwrap();
            (
                b.labeled.iter().map(|(i, _)| i.id.clone()).collect::<Vec<_>>(),
                b.unlabeled.iter().map(|i| i.id.clone()).collect::<Vec<_>>(),
                b.labeled[0].0.pixels().to_vec(),
            )
        };
        assert_eq!(ids(3), ids(3));
    }

    #[test]
    fn labeled_stream_ignores_unlabeled_pool() {
        let with = split(5, 7);
        let without = with.clone().without_unlabeled();
        let policy = AugmentPolicy { crop_size: 12, ..Default::default() };
        let mut a = make_batches(&with, 3, policy.clone(), 9, random_pairs).unwrap();
        let mut b = make_batches(&without, 3, policy, 9, random_pairs).unwrap();
        for _ in 0..5 {
            let (x, y) = (a.next().unwrap().unwrap(), b.next().unwrap().unwrap());
            assert_eq!(x.labeled.len(), y.labeled.len());
            for (p, q) in x.labeled.iter().zip(&y.labeled) {
                assert_eq!(p, q);
            }
        }
    }

    #[test]
    fn empty_labeled_pool_is_a_configuration_error() {
        let mut s = split(1, 3);
        s.labeled.clear();
        assert!(matches!(
            make_batches(&s, 2, AugmentPolicy::crop_only(16), 0, random_pairs),
            Err(crate::Error::Config(_))
        ));
    }
}
