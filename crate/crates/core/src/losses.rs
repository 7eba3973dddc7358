//! Loss terms and the ramped unsupervised weight.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, IGNORE};
use crate::error::{ensure, Error, Result};
use crate::network::LogitMap;
use crate::tensor::Tensor;

/// Pixel-mean cross-entropy over non-ignored pixels, its gradient w.r.t. the
/// logits, and the number of contributing pixels. No valid pixel gives 0.
pub(crate) fn cross_entropy_kernel(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<(f64, Tensor, usize)> {
    let (c, h, w) = logits.chw();
    let hw = h * w;
    ensure!(
        labels.len() == hw,
        Validation,
        "label map has {} pixels, logits have {}",
        labels.len(),
        hw
    );
    if let Some(&bad) = labels.iter().find(|&&y| y != ignore && y as usize >= c) {
        return Err(Error::Validation(format!("class id {bad} out of range for {c} classes")));
    }
    let valid = labels.iter().filter(|&&y| y != ignore).count();
    let mut grad = Tensor::zeros(&[c, h, w]);
    if valid == 0 {
        return Ok((0.0, grad, 0));
    }
    let x = logits.data();
    let g = grad.data_mut();
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    let mut probs = vec![0.0; c];
    for (p, &y) in labels.iter().enumerate() {
        if y == ignore {
            continue;
        }
        let max = (0..c).map(|k| x[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (k, pr) in probs.iter_mut().enumerate() {
            *pr = (x[k * hw + p] - max).exp();
            sum += *pr;
        }
        total += sum.ln() + max - x[y as usize * hw + p];
        for (k, pr) in probs.iter().enumerate() {
            let target = if k == y as usize { 1.0 } else { 0.0 };
            g[k * hw + p] = (pr / sum - target) * inv;
        }
    }
    Ok((total * inv, grad, valid))
}

/// `Σ (target − pred)² / (H·W)` and its gradient w.r.t. `pred`.
pub(crate) fn mse_kernel(target: &Tensor, pred: &Tensor) -> Result<(f64, Tensor)> {
    ensure!(
        target.shape() == pred.shape(),
        Validation,
        "mse: target {:?} vs prediction {:?}",
        target.shape(),
        pred.shape()
    );
    let (_, h, w) = pred.chw();
    let norm = (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &t), &p) in grad.data_mut().iter_mut().zip(target.data()).zip(pred.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / norm;
    }
    Ok((loss / norm, grad))
}

/// Mean sigmoid binary cross-entropy and its gradient.
pub(crate) fn bce_kernel(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure!(
        logits.len() == targets.len(),
        Validation,
        "classifier has {} outputs but {} targets",
        logits.len(),
        targets.len()
    );
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            let sig = 1.0 / (1.0 + (-x).exp());
            (sig - y) / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Pixel-mean cross-entropy of a logit map against a mask.
pub fn cross_entropy(logits: &LogitMap, mask: &LabelMask) -> Result<f64> {
    ensure!(
        (logits.height(), logits.width()) == (mask.height(), mask.width()),
        Validation,
        "logits {}x{} vs mask {}x{}",
        logits.height(),
        logits.width(),
        mask.height(),
        mask.width()
    );
    let (loss, _, valid) = cross_entropy_kernel(logits.tensor(), mask.classes(), IGNORE)?;
    if valid == 0 {
        log::warn!("cross-entropy over a fully ignored mask; returning 0");
    }
    Ok(loss)
}

/// Squared difference summed over channels and positions, divided by `H·W`.
pub fn mse_map(target: &LogitMap, pred: &LogitMap) -> Result<f64> {
    Ok(mse_kernel(target.tensor(), pred.tensor())?.0)
}

/// Multi-label sigmoid cross-entropy against foreground presence.
pub fn classifier_loss(logits: &[f64], present: &[f64]) -> Result<f64> {
    Ok(bce_kernel(logits, present)?.0)
}

/// Gaussian ramp-up of the unsupervised weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampSchedule {
    pub w_max: f64,
    /// Share of `max_iter` spent ramping.
    pub ramp_fraction: f64,
}

impl Default for RampSchedule {
    fn default() -> Self {
        RampSchedule {
            w_max: 1.0,
            ramp_fraction: 0.2,
        }
    }
}

impl RampSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.w_max >= 0.0, Config, "ramp.w_max must be non-negative, got {}", self.w_max);
        ensure!(
            self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0,
            Config,
            "ramp.ramp_fraction must be in (0, 1], got {}",
            self.ramp_fraction
        );
        Ok(())
    }
}

/// `w_max·exp(−5·(1 − t/T)²)` for `t < T = ramp_fraction·max_iter`, then `w_max`.
pub fn unsup_weight(iter: u64, max_iter: u64, sched: &RampSchedule) -> f64 {
    let ramp = sched.ramp_fraction * max_iter as f64;
    let t = iter as f64;
    if t >= ramp {
        sched.w_max
    } else {
        let phase = 1.0 - t / ramp;
        sched.w_max * (-5.0 * phase * phase).exp()
    }
}

/// The individual loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_ce: f64,
    pub l_dec: f64,
    pub l_cla: f64,
    pub l_usup: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_dec: f64,
    pub l_cla: f64,
    pub l_usup: f64,
    pub omega_usup: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn supervised(&self) -> f64 {
        self.l_ce + self.l_dec + self.l_cla
    }
}

/// `total = (l_ce + l_dec + l_cla) + ω·l_usup`.
pub fn total_loss(parts: LossParts, omega: f64) -> Result<LossBundle> {
    let LossParts {
        l_ce,
        l_dec,
        l_cla,
        l_usup,
    } = parts;
    for (name, v) in [("l_ce", l_ce), ("l_dec", l_dec), ("l_cla", l_cla), ("l_usup", l_usup), ("omega", omega)] {
        ensure!(v.is_finite(), Numeric, "{} is not finite ({})", name, v);
    }
    Ok(LossBundle {
        l_ce,
        l_dec,
        l_cla,
        l_usup,
        omega_usup: omega,
        total: l_ce + l_dec + l_cla + omega * l_usup,
    })
}
