//! Labeled-unlabeled image interpolation.

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the interpolation weight of the labeled image is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaPolicy {
    /// Shape of the symmetric Beta(α, α) distribution.
    pub alpha: f64,
    /// Draws are folded to `min(λ, 1 − λ)` and re-drawn until below this
    /// bound when it is smaller than 0.5.
    pub clamp_max: f64,
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy {
            alpha: 1.0,
            clamp_max: 0.5,
        }
    }
}

impl LambdaPolicy {
    pub fn cityscapes() -> Self {
        LambdaPolicy {
            alpha: 1.0,
            clamp_max: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha > 0.0, Config, "lambda.alpha must be positive, got {}", self.alpha);
        ensure!(
            self.clamp_max > 0.0 && self.clamp_max <= 0.5,
            Config,
            "lambda.clamp_max must be in (0, 0.5], got {}",
            self.clamp_max
        );
        Ok(())
    }
}

/// Draw λ ∈ (0, clamp_max]; strictly below `clamp_max` when it is < 0.5.
pub fn sample_lambda(policy: &LambdaPolicy, rng: &mut Rng) -> f64 {
    let beta = Beta::new(policy.alpha, policy.alpha).expect("alpha validated positive");
    loop {
        let raw: f64 = beta.sample(rng);
        let lambda = raw.min(1.0 - raw);
        if lambda <= 0.0 {
            continue;
        }
        if policy.clamp_max >= 0.5 || lambda < policy.clamp_max {
            return lambda;
        }
    }
}

/// `λ·labeled + (1 − λ)·unlabeled`, elementwise.
pub fn mix_images(labeled: &Tensor, unlabeled: &Tensor, lambda: f64) -> Result<Tensor> {
    ensure!(
        labeled.shape() == unlabeled.shape(),
        Validation,
        "cannot mix {:?} with {:?}",
        labeled.shape(),
        unlabeled.shape()
    );
    ensure!((0.0..=1.0).contains(&lambda), Validation, "lambda {} outside [0, 1]", lambda);
    let data = labeled
        .data()
        .iter()
        .zip(unlabeled.data())
        .map(|(&l, &u)| lambda * l + (1.0 - lambda) * u)
        .collect();
    Tensor::from_vec(labeled.shape(), data)
}

/// One unfolded Beta(α, α) draw.
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> f64 {
    Beta::new(alpha, alpha).expect("alpha positive").sample(rng)
}

/// Mixed images and their weights for one batch.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub images: Vec<Tensor>,
    pub lambdas: Vec<f64>,
    /// `(labeled id, unlabeled id)` per mixed image.
    pub sources: Vec<(String, String)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_constants() {
        let a = Tensor::full(&[3, 2, 2], 1.0);
        let b = Tensor::full(&[3, 2, 2], 0.0);
        assert_eq!(mix_images(&a, &b, 0.0).unwrap(), b);
        assert_eq!(mix_images(&a, &b, 1.0).unwrap(), a);
        assert!(mix_images(&a, &b, 0.3).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(mix_images(&a, &Tensor::zeros(&[3, 2, 1]), 0.3).is_err());
    }

    #[test]
    fn folded_draws_average_a_quarter() {
        // E[min(U, 1 − U)] = 1/4 for U ~ Uniform(0, 1)
        let policy = LambdaPolicy::default();
        let mut rng = keyed(21, &[]);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_lambda(&policy, &mut rng)).collect();
        assert!(draws.iter().all(|&l| l > 0.0 && l <= 0.5));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.25).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn clamp_rejects_large_draws() {
        let policy = LambdaPolicy::cityscapes();
        let mut rng = keyed(4, &[]);
        assert!((0..100_000).all(|_| sample_lambda(&policy, &mut rng) < 0.3));
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = keyed(8, &[]);
        let mut xs: Vec<f64> = (0..100_000).map(|_| sample_beta(1.0, &mut rng)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn policy_validation() {
        assert!(LambdaPolicy { alpha: 1.0, clamp_max: 0.6 }.validate().is_err());
        assert!(LambdaPolicy { alpha: 0.0, clamp_max: 0.5 }.validate().is_err());
        assert!(LambdaPolicy::cityscapes().validate().is_ok());
    }

    proptest! {
        #[test]
        fn mixing_is_convex_and_symmetric(
            a in proptest::collection::vec(-3.0f64..3.0, 12),
            b in proptest::collection::vec(-3.0f64..3.0, 12),
            lambda in 0.0f64..=1.0,
        ) {
            let ta = Tensor::from_vec(&[3, 2, 2], a.clone()).unwrap();
            let tb = Tensor::from_vec(&[3, 2, 2], b.clone()).unwrap();
            let m = mix_images(&ta, &tb, lambda).unwrap();
            for i in 0..12 {
                let v = m.data()[i];
                prop_assert!(v >= a[i].min(b[i]) - 1e-12 && v <= a[i].max(b[i]) + 1e-12);
            }
            let swapped = mix_images(&tb, &ta, 1.0 - lambda).unwrap();
            prop_assert!(m.max_abs_diff(&swapped) <= 1e-12);
        }
    }
}
