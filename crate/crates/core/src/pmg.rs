//! Pseudo-mask generation: recover a per-sample target by subtracting the
//! labeled prediction from the prediction on the mixed image.
//!
//! All maps are pre-softmax logits. The results are used as fixed targets
//! and never carry gradient.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::network::LogitMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoupleMode {
    Hard,
    Soft,
}

impl DecoupleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoupleMode::Hard => "hard",
            DecoupleMode::Soft => "soft",
        }
    }
}

/// `mixed − weight·labeled`, elementwise.
fn subtract_scaled(mixed: &LogitMap, labeled: &LogitMap, weight: f64) -> Result<LogitMap> {
    ensure!(
        mixed.tensor().shape() == labeled.tensor().shape(),
        Validation,
        "decoupling maps of shape {:?} and {:?}",
        mixed.tensor().shape(),
        labeled.tensor().shape()
    );
    let data = mixed
        .tensor()
        .data()
        .iter()
        .zip(labeled.tensor().data())
        .map(|(&m, &l)| m - weight * l)
        .collect();
    LogitMap::new(Tensor::from_vec(mixed.tensor().shape(), data)?)
}

/// `M_mix − M_l`.
pub fn hard_decouple(mixed: &LogitMap, labeled: &LogitMap) -> Result<LogitMap> {
    subtract_scaled(mixed, labeled, 1.0)
}

/// `M_mix − λ·M_l`.
pub fn soft_decouple(mixed: &LogitMap, labeled: &LogitMap, lambda: f64) -> Result<LogitMap> {
    ensure!((0.0..=1.0).contains(&lambda), Validation, "lambda {} outside [0, 1]", lambda);
    subtract_scaled(mixed, labeled, lambda)
}

pub fn decouple(mode: DecoupleMode, mixed: &LogitMap, labeled: &LogitMap, lambda: f64) -> Result<LogitMap> {
    match mode {
        DecoupleMode::Hard => hard_decouple(mixed, labeled),
        DecoupleMode::Soft => soft_decouple(mixed, labeled, lambda),
    }
}

/// Target for the labeled-pair consistency term: the prediction on a
/// labeled-labeled mix minus the seed sample's prediction.
pub fn decouple_labeled(mixed_pair: &LogitMap, seed: &LogitMap) -> Result<LogitMap> {
    subtract_scaled(mixed_pair, seed, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(c: usize, h: usize, w: usize, v: Vec<f64>) -> LogitMap {
        LogitMap::new(Tensor::from_vec(&[c, h, w], v).unwrap()).unwrap()
    }

    #[test]
    fn hard_examples() {
        let mix = lm(1, 1, 2, vec![2.0, 1.0]);
        let l = lm(1, 1, 2, vec![1.0, 1.0]);
        assert_eq!(hard_decouple(&mix, &l).unwrap().tensor().data(), &[1.0, 0.0]);
        assert!(hard_decouple(&l, &l).unwrap().tensor().data().iter().all(|&v| v == 0.0));
        assert!(hard_decouple(&l, &lm(2, 1, 1, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn soft_examples() {
        let mix = lm(1, 1, 1, vec![1.0]);
        let l = lm(1, 1, 1, vec![0.5]);
        assert!((soft_decouple(&mix, &l, 0.4).unwrap().tensor().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(soft_decouple(&mix, &l, 0.0).unwrap(), mix);
        assert_eq!(soft_decouple(&mix, &l, 1.0).unwrap(), hard_decouple(&mix, &l).unwrap());
    }

    #[test]
    fn labeled_decoupling_matches_loop_oracle() {
        let a: Vec<f64> = (0..24).map(|i| (i as f64 * 1.3).cos() * 4.0).collect();
        let b: Vec<f64> = (0..24).map(|i| (i as f64 * 0.4).sin() * 2.0).collect();
        let got = decouple_labeled(&lm(2, 3, 4, a.clone()), &lm(2, 3, 4, b.clone())).unwrap();
        let mut expected = vec![0.0; 24];
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let i = (c * 3 + y) * 4 + x;
                    expected[i] = a[i] - b[i];
                }
            }
        }
        assert_eq!(got.tensor().data(), expected.as_slice());
        let seed = lm(2, 3, 4, b.clone());
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let partner = decouple_labeled(&lm(2, 3, 4, sum), &seed).unwrap();
        assert!(partner.tensor().max_abs_diff(&Tensor::from_vec(&[2, 3, 4], a).unwrap()) < 1e-12);
    }

    /// Shift a `[C, H, W]` map down/right by `(dy, dx)` with wrap-around.
    fn roll(m: &LogitMap, dy: usize, dx: usize) -> LogitMap {
        let t = m.tensor();
        let (c, h, w) = t.chw();
        let mut out = vec![0.0; t.len()];
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(k * h + (y + dy) % h) * w + (x + dx) % w] = t.at(k, y, x);
                }
            }
        }
        lm(c, h, w, out)
    }

    proptest! {
        #[test]
        fn decoupling_identities(
            a in proptest::collection::vec(-50.0f64..50.0, 18),
            b in proptest::collection::vec(-50.0f64..50.0, 18),
            lambda in 0.0f64..=1.0,
            dy in 0usize..3, dx in 0usize..3,
        ) {
            let (ma, mb) = (lm(2, 3, 3, a.clone()), lm(2, 3, 3, b.clone()));
            let sum = lm(2, 3, 3, a.iter().zip(&b).map(|(x, y)| x + y).collect());
            let hard = hard_decouple(&sum, &ma).unwrap();
            // (a + b) − a rounds back to b up to one ulp of the sum
            prop_assert!(hard.tensor().max_abs_diff(mb.tensor()) <= 1e-13);
            prop_assert_eq!(soft_decouple(&sum, &ma, 1.0).unwrap(), hard.clone());
            let shifted = soft_decouple(&roll(&sum, dy, dx), &roll(&ma, dy, dx), lambda).unwrap();
            prop_assert_eq!(shifted, roll(&soft_decouple(&sum, &ma, lambda).unwrap(), dy, dx));
        }
    }
}
