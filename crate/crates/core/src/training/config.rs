use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentPolicy, DatasetLayout};
use crate::error::{ensure, Result};
use crate::losses::RampSchedule;
use crate::mixing::LambdaPolicy;
use crate::network::{NetConfig, Network};
use crate::pairing::PairingStrategy;
use crate::pmg::DecoupleMode;

/// Where the training data comes from and how the labeled subset is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub layout: DatasetLayout,
    pub root: PathBuf,
    /// Share of the training ids that keep their masks.
    pub labeled_ratio: f64,
    /// File with one labeled id per line; overrides `labeled_ratio`.
    pub labeled_list: Option<PathBuf>,
    pub split_seed: u64,
    /// Train on the unlabeled pool (false gives a supervised-only run).
    pub use_unlabeled: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            layout: DatasetLayout::Synthetic,
            root: PathBuf::from("data/synthetic"),
            labeled_ratio: 0.1,
            labeled_list: None,
            split_seed: 0,
            use_unlabeled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Root under which run directories are created.
    pub dir: PathBuf,
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
            checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: u64,
    pub batch_size: usize,
    /// Supervised-only iterations at the start; 10% of `max_iter` when unset.
    pub warmup_iters: Option<u64>,
    /// Validation cadence; `max(500, max_iter / 20)` when unset.
    pub eval_interval: Option<u64>,
    pub log_interval: u64,
    pub use_mitrans: bool,
    pub pairing: PairingStrategy,
    pub decouple: DecoupleMode,
    /// Weights from an earlier run or a pretrained backbone, matched by name.
    pub pretrained: Option<PathBuf>,
    pub lambda: LambdaPolicy,
    pub ramp: RampSchedule,
    pub augment: AugmentPolicy,
    pub network: NetConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            max_iter: 40_000,
            batch_size: 12,
            warmup_iters: None,
            eval_interval: None,
            log_interval: 10,
            use_mitrans: true,
            pairing: PairingStrategy::Similar,
            decouple: DecoupleMode::Soft,
            pretrained: None,
            lambda: LambdaPolicy::default(),
            ramp: RampSchedule::default(),
            augment: AugmentPolicy::default(),
            network: NetConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_iters.unwrap_or(self.max_iter / 10)
    }

    pub fn eval_every(&self) -> u64 {
        self.eval_interval.unwrap_or_else(|| (self.max_iter / 20).max(500))
    }

    /// Whether the unlabeled branch can ever contribute.
    pub fn uses_unlabeled(&self) -> bool {
        self.data.use_unlabeled && self.ramp.w_max > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.base_lr.is_finite() && self.base_lr > 0.0,
            Config,
            "base_lr must be positive, got {}",
            self.base_lr
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Config,
            "momentum must be in [0, 1), got {}",
            self.momentum
        );
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay must be non-negative, got {}", self.weight_decay);
        ensure!(self.power > 0.0, Config, "power must be positive, got {}", self.power);
        ensure!(self.max_iter >= 1, Config, "max_iter must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1, got {}", self.batch_size);
        ensure!(
            self.warmup() <= self.max_iter,
            Config,
            "warmup_iters ({}) exceeds max_iter ({})",
            self.warmup(),
            self.max_iter
        );
        ensure!(self.eval_every() >= 1, Config, "eval_interval must be at least 1");
        ensure!(self.log_interval >= 1, Config, "log_interval must be at least 1");
        ensure!(
            self.data.labeled_ratio > 0.0 && self.data.labeled_ratio <= 1.0,
            Config,
            "data.labeled_ratio must be in (0, 1], got {}",
            self.data.labeled_ratio
        );
        ensure!(
            self.augment.crop_size >= 1,
            Config,
            "augment.crop_size must be positive (inputs are padded to a multiple of {})",
            Network::STRIDE
        );
        self.lambda.validate()?;
        self.ramp.validate()?;
        self.augment.validate()?;
        self.network.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
