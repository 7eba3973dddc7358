//! Command-line workflows: configuration files, run directories and the
//! six subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::data::{
    generate_synthetic_dataset, load_dataset, voc_palette, cityscapes_palette, DatasetLayout, DatasetSplit,
    LabeledSelection, LoadOptions, SplitName, SyntheticSpec,
};
use crate::error::{ensure, Error, Result};
use crate::evalkit::{evaluate, export_predictions, mean_activation_profile, run_ablation, AblationGrid};
use crate::mixing::mix_images;
use crate::training::{load_checkpoint, train, TrainConfig, TrainData};

/// Overrides the output root of every command.
pub const RUN_DIR_ENV: &str = "GUIDEDMIX_RUN_DIR";

fn parse_toml<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        Error::Config(format!("{origin}: line {line}: {}", e.message().trim()))
    })
}

/// Parse and validate a training configuration. Missing keys take their
/// defaults; unknown keys are rejected.
pub fn parse_config_str(text: &str, origin: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = parse_toml(text, origin)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

pub fn parse_grid(path: &Path) -> Result<AblationGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text, &path.display().to_string())
}

/// `$GUIDEDMIX_RUN_DIR` when set, else `fallback`.
pub fn output_root(fallback: &Path) -> PathBuf {
    match std::env::var_os(RUN_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback.to_path_buf(),
    }
}

/// Create `root/<command>-NNN` with the first free index.
pub fn fresh_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for n in 0.. {
        let dir = root.join(format!("{command}-{n:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("run directory indices are unbounded")
}

pub fn write_manifest(dir: &Path, command: &str, config_hash: &str, seed: u64) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json")).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Parser)]
#[command(name = "guidedmix", version, about = "Semi-supervised segmentation by labeled-unlabeled mixing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset in the VOC layout.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_images: usize,
        #[arg(long, default_value_t = 100)]
        n_val: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layout: Option<DatasetLayout>,
    },
    /// Train every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Base configuration the grid varies.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-layer mean activations of a validation image and its mix with another.
    InspectActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layout: Option<DatasetLayout>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Weight of the partner image in the mix.
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
    },
    /// Write class-id and colour PNGs for a validation split.
    ExportPreds {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layout: Option<DatasetLayout>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(TrainConfig::default()),
    }
}

fn load_val(data: &Path, layout: DatasetLayout) -> Result<DatasetSplit> {
    let opts = LoadOptions::new(layout, SplitName::Val, LabeledSelection::Ratio { ratio: 1.0, seed: 0 });
    load_dataset(data, &opts)
}

/// Run one command; returns the directory it wrote.
pub fn dispatch(command: Command) -> Result<PathBuf> {
    match command {
        Command::MakeSynthetic {
            out,
            n_images,
            n_val,
            size,
            classes,
            seed,
        } => {
            let spec = SyntheticSpec {
                n_val,
                ..SyntheticSpec::new(n_images, size, classes, seed)
            };
            generate_synthetic_dataset(&out, &spec)?;
            write_manifest(&out, "make-synthetic", "", seed)?;
            println!("wrote {} training and {} validation images to {}", n_images, n_val, out.display());
            Ok(out)
        }
        Command::Train { config, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = TrainData::load(&cfg.data)?;
            let dir = fresh_run_dir(&output_root(&cfg.output.dir), "train")?;
            let outcome = train(&cfg, &data, Some(&dir))?;
            match (outcome.final_miou, outcome.best_miou) {
                (Some(f), Some(b)) => println!("final mIoU {f:.4} (best {b:.4})"),
                _ => println!("no evaluation ran"),
            }
            println!("{}", dir.display());
            Ok(dir)
        }
        Command::Eval {
            checkpoint,
            data,
            layout,
        } => {
            let (net, params, manifest) = load_checkpoint(&checkpoint)?;
            let cfg = &manifest.config;
            let val = load_val(&data, layout.unwrap_or(cfg.data.layout))?;
            ensure!(
                val.num_classes() == manifest.num_classes,
                Config,
                "checkpoint predicts {} classes, dataset has {}",
                manifest.num_classes,
                val.num_classes()
            );
            let dir = fresh_run_dir(&output_root(&cfg.output.dir), "eval")?;
            write_manifest(&dir, "eval", &manifest.config_hash, cfg.seed)?;
            let record = evaluate(&net, &params, &val, cfg.use_mitrans)?;
            let path = dir.join("metrics.json");
            fs::write(&path, serde_json::to_string_pretty(&record).expect("json")).map_err(|e| Error::io(&path, e))?;
            println!("mIoU {:.4} over {} images", record.miou, record.n_images);
            for (name, iou) in val.class_names.iter().zip(&record.per_class_iou) {
                match iou {
                    Some(v) => println!("  {name}: {v:.4}"),
                    None => println!("  {name}: absent"),
                }
            }
            Ok(dir)
        }
        Command::Ablate { grid, config } => {
            let grid = parse_grid(&grid)?;
            let base = load_config(config.as_deref())?;
            let data = TrainData::load(&base.data)?;
            let dir = fresh_run_dir(&output_root(&base.output.dir), "ablate")?;
            write_manifest(&dir, "ablate", &base.hash(), base.seed)?;
            let table = run_ablation(&grid, &base, &data, Some(&dir))?;
            print!("{}", table.to_markdown());
            Ok(dir)
        }
        Command::InspectActivations {
            checkpoint,
            data,
            layout,
            index,
            lambda,
        } => {
            let (net, params, manifest) = load_checkpoint(&checkpoint)?;
            let cfg = &manifest.config;
            let val = load_val(&data, layout.unwrap_or(cfg.data.layout))?;
            let n = val.labeled.len();
            ensure!(index < n, Config, "index {} out of range for {} validation images", index, n);
            ensure!((0.0..=1.0).contains(&lambda), Config, "lambda {} outside [0, 1]", lambda);
            let unlabeled = val.normalization.to_input(&val.labeled[index].image()?);
            let partner = val.normalization.to_input(&val.labeled[(index + 1) % n].image()?);
            let (h, w) = {
                let (_, uh, uw) = unlabeled.chw();
                let (_, ph, pw) = partner.chw();
                (uh.min(ph), uw.min(pw))
            };
            let unlabeled = unlabeled.crop_top_left(h, w);
            let mixed = mix_images(&partner.crop_top_left(h, w), &unlabeled, lambda)?;
            let profile = mean_activation_profile(&net, &params, &unlabeled, &mixed, cfg.use_mitrans)?;
            let dir = fresh_run_dir(&output_root(&cfg.output.dir), "activations")?;
            write_manifest(&dir, "inspect-activations", &manifest.config_hash, cfg.seed)?;
            let path = dir.join("activations.csv");
            fs::write(&path, profile.to_csv()).map_err(|e| Error::io(&path, e))?;
            let higher = profile.mixed.iter().zip(&profile.unlabeled).filter(|(m, u)| m > u).count();
            println!(
                "{} layers, mixed input has the higher mean activation in {}",
                profile.layers.len(),
                higher
            );
            println!("{}", path.display());
            Ok(dir)
        }
        Command::ExportPreds {
            checkpoint,
            data,
            layout,
        } => {
            let (net, params, manifest) = load_checkpoint(&checkpoint)?;
            let cfg = &manifest.config;
            let layout = layout.unwrap_or(cfg.data.layout);
            let val = load_val(&data, layout)?;
            let palette = match layout {
                DatasetLayout::Cityscapes => cityscapes_palette(),
                _ => voc_palette(val.num_classes()),
            };
            let images = val.labeled.iter().map(|s| s.image()).collect::<Result<Vec<_>>>()?;
            let dir = fresh_run_dir(&output_root(&cfg.output.dir), "preds")?;
            write_manifest(&dir, "export-preds", &manifest.config_hash, cfg.seed)?;
            let written = export_predictions(&net, &params, &val.normalization, &images, &dir, &palette, cfg.use_mitrans)?;
            println!("wrote {} files to {}", written.len(), dir.display());
            Ok(dir)
        }
    }
}

/// Parse `args`, run the command and map the outcome to an exit code:
/// 0 success, 1 runtime error, 2 usage error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config_str("", "empty").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.base_lr, 1e-3);
    }

    #[test]
    fn dotted_keys_reach_nested_sections() {
        let cfg = parse_config_str("lambda.clamp_max = 0.3\n", "c").unwrap();
        assert_eq!(cfg.lambda.clamp_max, 0.3);
    }

    #[test]
    fn errors_name_the_field_or_line() {
        let e = parse_config_str("batch_size = 0\n", "c").unwrap_err().to_string();
        assert!(e.contains("batch_size"), "{e}");
        let e = parse_config_str("seed = 1\n\nbogus = 2\n", "c").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("bogus"), "{e}");
        let e = parse_config_str("seed = [\n", "c").unwrap_err().to_string();
        assert!(e.contains("line"), "{e}");
    }

    #[test]
    fn resolved_config_parses_back_to_itself() {
        let cfg = parse_config_str("max_iter = 77\ndecouple = \"hard\"\n[network]\nwidth = 6\n", "c").unwrap();
        assert_eq!(parse_config_str(&cfg.to_toml(), "echo").unwrap(), cfg);
    }

    #[test]
    fn run_dirs_are_fresh() {
        let root = tempfile::tempdir().unwrap();
        let a = fresh_run_dir(root.path(), "train").unwrap();
        let b = fresh_run_dir(root.path(), "train").unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(main_with_args(["guidedmix", "frobnicate"]), 2);
        assert_eq!(main_with_args(["guidedmix", "eval"]), 2);
        assert_eq!(main_with_args(["guidedmix", "--help"]), 0);
    }
}
