//! Warm-up on labeled data, then joint labeled and mixed training with SGD
//! under a poly learning-rate schedule.

mod config;
mod optim;

use std::cell::{Cell, RefCell};
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{DataConfig, OutputConfig, TrainConfig};
pub use optim::{poly_lr, sgd_step, OptimizerState};

use crate::data::{
    load_dataset, make_batches, DatasetSplit, ImageSample, LabelMask, LabeledSelection, LoadOptions, Normalization,
    PairedBatch, SplitName,
};
use crate::error::{ensure, Error, Result};
use crate::evalkit::evaluate;
use crate::losses::{total_loss, unsup_weight, LossBundle, LossParts};
use crate::mixing::{mix_images, sample_lambda};
use crate::network::{pad_labels, pad_to_stride, Forward, Network};
use crate::pairing::{pair_labeled_partners, pair_random, pair_similar, pooled_features, FeatureVector, PairingAssignment, PairingStrategy};
use crate::params::{Gradients, ParamStore};
use crate::pmg::{decouple, decouple_labeled, DecoupleMode};
use crate::rng::{keyed, stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "iter,lr,l_ce,l_dec,l_cla,l_usup,omega,total,val_miou";

/// Training and validation splits.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
}

impl TrainData {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let selection = match &cfg.labeled_list {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                LabeledSelection::Ids(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
            }
            None => LabeledSelection::Ratio {
                ratio: cfg.labeled_ratio,
                seed: cfg.split_seed,
            },
        };
        let train = load_dataset(&cfg.root, &LoadOptions::new(cfg.layout, SplitName::Train, selection.clone()))?;
        let val = load_dataset(&cfg.root, &LoadOptions::new(cfg.layout, SplitName::Val, selection))?;
        Ok(TrainData { train, val })
    }
}

/// Network inputs of one batch plus the random draws of the step.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub iteration: u64,
    /// Normalised, stride-padded labeled images.
    pub labeled: Vec<Tensor>,
    /// Stride-padded labels (`IGNORE` in the padding).
    pub labels: Vec<Vec<u8>>,
    pub presence: Vec<Vec<f64>>,
    pub unlabeled: Vec<Tensor>,
    pub pairing: PairingAssignment,
    /// λ per unlabeled sample.
    pub lambdas: Vec<f64>,
    /// λ per labeled sample for the labeled-labeled mix.
    pub labeled_lambdas: Vec<f64>,
}

const UNLABELED_MIX: u64 = 0;
const LABELED_MIX: u64 = 1;

impl StepInputs {
    pub fn from_batch(batch: &PairedBatch, norm: &Normalization, cfg: &TrainConfig) -> Self {
        let t = batch.iteration;
        let prepare = |img: &ImageSample| pad_to_stride(&norm.to_input(img));
        let draw = |branch: u64, i: usize| {
            sample_lambda(&cfg.lambda, &mut keyed(cfg.seed, &[stream::LAMBDA, t, branch, i as u64]))
        };
        StepInputs {
            iteration: t,
            labeled: batch.labeled.iter().map(|(img, _)| prepare(img)).collect(),
            labels: batch
                .labeled
                .iter()
                .map(|(_, m)| pad_labels(m.classes(), m.height(), m.width()))
                .collect(),
            presence: batch.labeled.iter().map(|(_, m)| m.presence()).collect(),
            unlabeled: batch.unlabeled.iter().map(prepare).collect(),
            pairing: batch.pairing.clone(),
            lambdas: (0..batch.unlabeled.len()).map(|k| draw(UNLABELED_MIX, k)).collect(),
            labeled_lambdas: (0..batch.labeled.len()).map(|i| draw(LABELED_MIX, i)).collect(),
        }
    }
}

/// Which terms of the objective are active in a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub use_mitrans: bool,
    pub decouple: DecoupleMode,
    pub pairing: PairingStrategy,
    /// Supervised-only step (`L_ce + L_cla`).
    pub warmup: bool,
    /// Weight of the unlabeled term; 0 skips the unlabeled branch.
    pub omega: f64,
    /// Seed keying the labeled-partner draw.
    pub seed: u64,
}

impl StepSettings {
    pub fn new(cfg: &TrainConfig, iteration: u64) -> Self {
        let warmup = iteration < cfg.warmup();
        StepSettings {
            use_mitrans: cfg.use_mitrans,
            decouple: cfg.decouple,
            pairing: cfg.pairing,
            warmup,
            omega: if warmup { 0.0 } else { unsup_weight(iteration, cfg.max_iter, &cfg.ramp) },
            seed: cfg.seed,
        }
    }
}

/// Detached targets of the consistency terms.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTargets {
    /// Labeled partner of every labeled sample.
    pub partners: Vec<usize>,
    /// Target for the partner's prediction, per labeled sample.
    pub dec: Vec<Tensor>,
    /// Decoupled target per unlabeled sample (empty when the branch is off).
    pub usup: Vec<Tensor>,
}

/// Outcome of one recorded step.
pub struct StepResult {
    pub losses: LossBundle,
    pub grads: Gradients,
    pub targets: Option<StepTargets>,
}

fn inference(net: &Network, params: &ParamStore, x: &Tensor, use_mitrans: bool) -> Result<Tensor> {
    Ok(net.full_forward(params, x, use_mitrans)?.0.into_tensor())
}

fn compute_targets(
    net: &Network,
    tape: &Tape,
    inputs: &StepInputs,
    settings: &StepSettings,
    labeled: &[Forward],
    with_unlabeled: bool,
) -> Result<StepTargets> {
    let params = tape.params();
    let m_l: Vec<crate::network::LogitMap> = labeled
        .iter()
        .map(|f| crate::network::LogitMap::new(tape.value(f.logits).clone()))
        .collect::<Result<_>>()?;
    let feats: Vec<FeatureVector> = labeled
        .iter()
        .map(|f| FeatureVector {
            id: String::new(),
            values: tape.value(f.pooled).data().to_vec(),
        })
        .collect();
    let mut rng = keyed(settings.seed, &[stream::LABELED_PARTNER, inputs.iteration]);
    let partners = pair_labeled_partners(&feats, settings.pairing, &mut rng)?;
    let mut dec = Vec::with_capacity(partners.len());
    for (i, &j) in partners.iter().enumerate() {
        let x = mix_images(&inputs.labeled[i], &inputs.labeled[j], inputs.labeled_lambdas[i])?;
        let mixed = crate::network::LogitMap::new(inference(net, params, &x, settings.use_mitrans)?)?;
        dec.push(decouple_labeled(&mixed, &m_l[i])?.into_tensor());
    }
    let mut usup = Vec::new();
    if with_unlabeled {
        for &(k, l) in &inputs.pairing.pairs {
            let lambda = inputs.lambdas[k];
            let x = mix_images(&inputs.labeled[l], &inputs.unlabeled[k], lambda)?;
            let mixed = crate::network::LogitMap::new(inference(net, params, &x, settings.use_mitrans)?)?;
            usup.push((k, decouple(settings.decouple, &mixed, &m_l[l], lambda)?.into_tensor()));
        }
        usup.sort_by_key(|(k, _)| *k);
    }
    Ok(StepTargets {
        partners,
        dec,
        usup: usup.into_iter().map(|(_, t)| t).collect(),
    })
}

/// Record the objective of one step on `tape`. Targets are recomputed from
/// the current parameters unless `frozen` is given.
pub fn record_step(
    tape: &mut Tape,
    net: &Network,
    inputs: &StepInputs,
    settings: &StepSettings,
    frozen: Option<&StepTargets>,
) -> Result<(Var, LossBundle, Option<StepTargets>)> {
    let n = inputs.labeled.len();
    ensure!(n >= 1, Validation, "a step needs at least one labeled sample");
    let inv_n = 1.0 / n as f64;
    let mut forwards = Vec::with_capacity(n);
    let mut terms = Vec::new();
    let (mut l_ce, mut l_cla, mut l_dec, mut l_usup) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let x = tape.constant(inputs.labeled[i].clone());
        let f = net.forward(tape, x, settings.use_mitrans)?;
        let (ce, _) = tape.cross_entropy(f.logits, &inputs.labels[i], crate::data::IGNORE)?;
        let cla = tape.bce_with_logits(f.cls_logits, &inputs.presence[i])?;
        l_ce += tape.value(ce).data()[0] * inv_n;
        l_cla += tape.value(cla).data()[0] * inv_n;
        terms.push((ce, inv_n));
        terms.push((cla, inv_n));
        forwards.push(f);
    }
    let mut targets_out = None;
    if !settings.warmup {
        let with_unlabeled = settings.omega > 0.0 && !inputs.unlabeled.is_empty();
        let targets = match frozen {
            Some(t) => t.clone(),
            None => compute_targets(net, tape, inputs, settings, &forwards, with_unlabeled)?,
        };
        for (i, &j) in targets.partners.iter().enumerate() {
            let dec = tape.mse_to_target(forwards[j].logits, &targets.dec[i])?;
            l_dec += tape.value(dec).data()[0] * inv_n;
            terms.push((dec, inv_n));
        }
        if with_unlabeled {
            ensure!(
                targets.usup.len() == inputs.unlabeled.len(),
                Validation,
                "{} unlabeled targets for {} unlabeled images",
                targets.usup.len(),
                inputs.unlabeled.len()
            );
            let w = settings.omega / inputs.unlabeled.len() as f64;
            for (x, target) in inputs.unlabeled.iter().zip(&targets.usup) {
                let xv = tape.constant(x.clone());
                let f = net.forward(tape, xv, settings.use_mitrans)?;
                let usup = tape.mse_to_target(f.logits, target)?;
                l_usup += tape.value(usup).data()[0] / inputs.unlabeled.len() as f64;
                terms.push((usup, w));
            }
        }
        targets_out = Some(targets);
    }
    let bundle = total_loss(
        LossParts {
            l_ce,
            l_dec,
            l_cla,
            l_usup,
        },
        settings.omega,
    )?;
    let root = tape.weighted_sum(&terms);
    Ok((root, bundle, targets_out))
}

/// Loss and parameter gradients of one step.
pub fn step_gradients(
    net: &Network,
    params: &ParamStore,
    inputs: &StepInputs,
    settings: &StepSettings,
    frozen: Option<&StepTargets>,
) -> Result<StepResult> {
    let mut tape = Tape::new(params);
    let (root, losses, targets) = record_step(&mut tape, net, inputs, settings, frozen)?;
    let grads = tape.backward(root).param_grads(&tape);
    Ok(StepResult { losses, grads, targets })
}

/// Total loss only (for finite-difference checks).
pub fn step_loss(
    net: &Network,
    params: &ParamStore,
    inputs: &StepInputs,
    settings: &StepSettings,
    frozen: Option<&StepTargets>,
) -> Result<f64> {
    let mut tape = Tape::new(params);
    let (root, _, _) = record_step(&mut tape, net, inputs, settings, frozen)?;
    Ok(tape.value(root).data()[0])
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub lr: f64,
    pub l_ce: f64,
    pub l_dec: f64,
    pub l_cla: f64,
    pub l_usup: f64,
    pub omega: f64,
    pub total: f64,
    pub val_miou: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.lr,
            self.l_ce,
            self.l_dec,
            self.l_cla,
            self.l_usup,
            self.omega,
            self.total,
            self.val_miou.map(|m| m.to_string()).unwrap_or_default()
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        ensure!(f.len() == 9, Format, "metrics row needs 9 fields, got {}", f.len());
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("metrics field {s:?}: {e}")));
        Ok(MetricsRow {
            iter: f[0].parse().map_err(|e| Error::Format(format!("metrics iter {:?}: {e}", f[0])))?,
            lr: num(f[1])?,
            l_ce: num(f[2])?,
            l_dec: num(f[3])?,
            l_cla: num(f[4])?,
            l_usup: num(f[5])?,
            omega: num(f[6])?,
            total: num(f[7])?,
            val_miou: if f[8].is_empty() { None } else { Some(num(f[8])?) },
        })
    }
}

/// Read a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some(METRICS_HEADER), Format, "{} lacks the metrics header", path.display());
    lines.map(MetricsRow::parse_csv).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub iteration: u64,
    pub metric: Option<f64>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub config: TrainConfig,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const CHECKPOINT_STEM: &str = "params";

pub fn save_checkpoint(dir: &Path, params: &ParamStore, manifest: &CheckpointManifest) -> Result<()> {
    params.save(dir, CHECKPOINT_STEM, serde_json::json!({ "iteration": manifest.iteration }))?;
    let p = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Rebuild the network of a checkpoint and load its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(Network, ParamStore, CheckpointManifest)> {
    let p = dir.join(CHECKPOINT_MANIFEST);
    ensure!(p.is_file(), Config, "checkpoint not found: {}", dir.display());
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    let (net, mut params) = Network::build(&manifest.config.network, manifest.num_classes, manifest.config.seed)?;
    params.load_exact(dir, CHECKPOINT_STEM)?;
    net.check_params(&params)?;
    Ok((net, params, manifest))
}

/// Result of a finished run.
pub struct TrainOutcome {
    pub network: Network,
    pub params: ParamStore,
    pub history: Vec<MetricsRow>,
    pub final_miou: Option<f64>,
    pub best_miou: Option<f64>,
    pub run_dir: Option<PathBuf>,
}

struct RunFiles {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let manifest = serde_json::json!({
            "command": "train",
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let man_path = dir.join("manifest.json");
        fs::write(&man_path, serde_json::to_string_pretty(&manifest).expect("json"))
            .map_err(|e| Error::io(&man_path, e))?;
        let metrics_path = dir.join("metrics.csv");
        let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut metrics = BufWriter::new(file);
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        writeln!(self.metrics, "{}", row.to_csv()).map_err(|e| Error::io(&path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&path, e))
    }
}

fn pair_batch(
    net: &Network,
    params: &ParamStore,
    norm: &Normalization,
    strategy: PairingStrategy,
    labeled: &[(ImageSample, LabelMask)],
    unlabeled: &[ImageSample],
    rng: &mut Rng,
) -> Result<PairingAssignment> {
    if unlabeled.is_empty() {
        return Ok(PairingAssignment::empty(strategy));
    }
    match strategy {
        PairingStrategy::Random => pair_random(labeled.len(), unlabeled.len(), rng),
        PairingStrategy::Similar => {
            let images: Vec<ImageSample> = labeled.iter().map(|(i, _)| i.clone()).collect();
            let lf = pooled_features(net, params, norm, &images)?;
            let uf = pooled_features(net, params, norm, unlabeled)?;
            pair_similar(&lf, &uf)
        }
    }
}

/// Train a model. With `run_dir` the resolved config, run manifest, metrics
/// CSV and checkpoints (`checkpoints/last`, `checkpoints/best`) are written
/// there.
pub fn train(cfg: &TrainConfig, data: &TrainData, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let num_classes = data.train.num_classes();
    ensure!(
        data.val.num_classes() == num_classes,
        Config,
        "train and val splits disagree on the class count"
    );
    let (net, mut init) = Network::build(&cfg.network, num_classes, cfg.seed)?;
    if let Some(path) = &cfg.pretrained {
        let (dir, stem) = archive_location(path);
        let report = init.load_matching(&dir, &stem)?;
        log::info!("loaded {} pretrained arrays, skipped {}", report.loaded.len(), report.skipped.len());
    }
    let split = if cfg.uses_unlabeled() {
        data.train.clone()
    } else {
        data.train.clone().without_unlabeled()
    };
    let norm = split.normalization;
    let params = RefCell::new(init);
    let pairing_active = Cell::new(false);
    let mut batches = make_batches(&split, cfg.batch_size, cfg.augment.clone(), cfg.seed, |l, u, rng| {
        if !pairing_active.get() {
            return pair_random(l.len(), u.len(), rng);
        }
        pair_batch(&net, &params.borrow(), &norm, cfg.pairing, l, u, rng)
    })?;
    let mut files = run_dir.map(|d| RunFiles::create(d, cfg)).transpose()?;
    let mut opt = OptimizerState::new(&params.borrow());
    let mut history = Vec::new();
    let (mut best, mut last_miou) = (None::<f64>, None);
    let eval_every = cfg.eval_every();
    let warmup = cfg.warmup();
    for t in 0..cfg.max_iter {
        pairing_active.set(t >= warmup);
        let batch = batches.next().expect("batch stream is endless")?;
        let inputs = StepInputs::from_batch(&batch, &norm, cfg);
        let settings = StepSettings::new(cfg, t);
        let lr = poly_lr(cfg.base_lr, t, cfg.max_iter, cfg.power);
        let step = step_gradients(&net, &params.borrow(), &inputs, &settings, None);
        let step = match step {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) => {
                if let Some(f) = &files {
                    let dir = f.dir.join("diverged");
                    params.borrow().save(&dir, CHECKPOINT_STEM, serde_json::json!({ "iteration": t }))?;
                    log::error!("training diverged at iteration {t}; parameters saved to {}", dir.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        sgd_step(&mut params.borrow_mut(), &step.grads, &mut opt, lr, cfg.momentum, cfg.weight_decay)?;

        let is_last = t + 1 == cfg.max_iter;
        let mut val_miou = None;
        if (t + 1) % eval_every == 0 || is_last {
            let record = evaluate(&net, &params.borrow(), &data.val, cfg.use_mitrans)?;
            log::info!(
                "iter {}/{}: total {:.4}, val mIoU {:.4}",
                t + 1,
                cfg.max_iter,
                step.losses.total,
                record.miou
            );
            val_miou = Some(record.miou);
            last_miou = Some(record.miou);
            let improved = best.map_or(true, |b| record.miou > b);
            if improved {
                best = Some(record.miou);
            }
            if let (Some(f), true) = (&files, cfg.output.checkpoints) {
                let manifest = CheckpointManifest {
                    config_hash: cfg.hash(),
                    iteration: t + 1,
                    metric: Some(record.miou),
                    num_classes,
                    class_names: split.class_names.clone(),
                    config: cfg.clone(),
                };
                save_checkpoint(&f.dir.join("checkpoints").join("last"), &params.borrow(), &manifest)?;
                if improved {
                    save_checkpoint(&f.dir.join("checkpoints").join("best"), &params.borrow(), &manifest)?;
                }
            }
        }
        if t % cfg.log_interval == 0 || val_miou.is_some() {
            let l = &step.losses;
            let row = MetricsRow {
                iter: t,
                lr,
                l_ce: l.l_ce,
                l_dec: l.l_dec,
                l_cla: l.l_cla,
                l_usup: l.l_usup,
                omega: l.omega_usup,
                total: l.total,
                val_miou,
            };
            if let Some(f) = &mut files {
                f.append(&row)?;
            }
            history.push(row);
        }
    }
    drop(batches);
    Ok(TrainOutcome {
        network: net,
        params: params.into_inner(),
        history,
        final_miou: last_miou,
        best_miou: best,
        run_dir: run_dir.map(Path::to_path_buf),
    })
}

/// Split a weight-archive path (`dir/stem.json`, `dir/stem` or a checkpoint
/// directory) into directory and stem.
pub fn archive_location(path: &Path) -> (PathBuf, String) {
    if path.is_dir() {
        return (path.to_path_buf(), CHECKPOINT_STEM.to_string());
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| CHECKPOINT_STEM.to_string());
    (dir, stem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AugmentPolicy, SyntheticSpec};
    use crate::network::NetConfig;

    pub(crate) fn toy_data(n_labeled: usize, n_unlabeled: usize, size: usize) -> TrainData {
        let spec = SyntheticSpec::new(n_labeled + n_unlabeled, size, 3, 2);
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
        let val = (0..3)
            .map(|i| {
                let (_, img, mask) = spec.sample(n_labeled + n_unlabeled + i);
                (img, mask)
            })
            .collect();
        TrainData {
            train: DatasetSplit::from_memory(labeled, unlabeled, spec.class_names()).unwrap(),
            val: DatasetSplit::from_memory(val, vec![], spec.class_names()).unwrap(),
        }
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            max_iter: 6,
            batch_size: 2,
            warmup_iters: Some(2),
            eval_interval: Some(3),
            log_interval: 1,
            base_lr: 0.01,
            ramp: crate::losses::RampSchedule {
                w_max: 1.0,
                ramp_fraction: 0.5,
            },
            augment: AugmentPolicy {
                crop_size: 16,
                ..Default::default()
            },
            network: NetConfig {
                width: 4,
                decoder_width: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn warmup_has_no_consistency_terms() {
        let cfg = toy_config();
        let outcome = train(&cfg, &toy_data(3, 4, 16), None).unwrap();
        assert_eq!(outcome.history.len(), 6);
        for row in &outcome.history[..2] {
            assert_eq!((row.l_dec, row.l_usup, row.omega), (0.0, 0.0, 0.0));
        }
        assert!(outcome.history[2..].iter().all(|r| r.l_usup > 0.0 && r.l_dec > 0.0));
        assert!(outcome.history[2].val_miou.is_some());
        assert!(outcome.final_miou.is_some());
    }

    #[test]
    fn run_directory_contents_and_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config();
        let outcome = train(&cfg, &toy_data(3, 4, 16), Some(dir.path())).unwrap();
        let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), outcome.history.len());
        for (a, b) in rows.iter().zip(&outcome.history) {
            assert_eq!(a, b);
        }
        let (net, params, manifest) = load_checkpoint(&dir.path().join("checkpoints").join("last")).unwrap();
        assert_eq!(manifest.iteration, 6);
        assert_eq!(manifest.config_hash, cfg.hash());
        let x = Tensor::from_vec(&[3, 16, 16], (0..768).map(|i| (i as f64).cos()).collect()).unwrap();
        assert_eq!(
            net.full_forward(&params, &x, true).unwrap(),
            outcome.network.full_forward(&outcome.params, &x, true).unwrap()
        );
        assert!(dir.path().join("checkpoints/best/manifest.json").is_file());
        let echoed: TrainConfig = toml::from_str(&fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
        assert_eq!(echoed, cfg);
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::Config(_))));
    }

    #[test]
    fn a_step_changes_parameters_only_with_positive_lr() {
        let data = toy_data(2, 2, 16);
        let cfg = toy_config();
        let (net, params) = Network::build(&cfg.network, 3, 0).unwrap();
        let mut stream = make_batches(&data.train, 2, cfg.augment.clone(), 0, |l, u, rng| pair_random(l.len(), u.len(), rng)).unwrap();
        let batch = stream.next().unwrap().unwrap();
        let inputs = StepInputs::from_batch(&batch, &data.train.normalization, &cfg);
        let settings = StepSettings { warmup: false, omega: 1.0, ..StepSettings::new(&cfg, 5) };
        let step = step_gradients(&net, &params, &inputs, &settings, None).unwrap();
        assert!(!step.grads.is_zero());
        let mut p0 = params.clone();
        let mut opt = OptimizerState::new(&p0);
        sgd_step(&mut p0, &step.grads, &mut opt, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(p0.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>(), params.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>());
        sgd_step(&mut p0, &step.grads, &mut opt, 0.1, 0.0, 0.0).unwrap();
        assert!(p0.iter().zip(params.iter()).any(|(a, b)| a.2 != b.2));
    }

    #[test]
    fn metrics_rows_round_trip() {
        let row = MetricsRow {
            iter: 3,
            lr: 1.0 / 3.0,
            l_ce: 0.5,
            l_dec: 0.0,
            l_cla: 0.25,
            l_usup: 1e-9,
            omega: 0.006_737_946_999_085_467,
            total: 2.0,
            val_miou: None,
        };
        assert_eq!(MetricsRow::parse_csv(&row.to_csv()).unwrap(), row);
        let with = MetricsRow { val_miou: Some(0.5), ..row };
        assert_eq!(MetricsRow::parse_csv(&with.to_csv()).unwrap(), with);
    }
}
