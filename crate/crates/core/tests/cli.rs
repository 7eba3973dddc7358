use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn guidedmix(run_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidedmix"))
        .args(args)
        .env("GUIDEDMIX_RUN_DIR", run_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn guidedmix")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {stdout}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn only_run(root: &Path, prefix: &str) -> PathBuf {
    let mut runs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(runs.len(), 1, "{prefix} runs: {runs:?}");
    runs.pop().unwrap()
}

#[test]
fn synthetic_train_eval_export_inspect_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let data_s = data.to_str().unwrap();

    ok(&guidedmix(
        &runs,
        &["make-synthetic", "--out", data_s, "--n-images", "12", "--n-val", "3", "--size", "16", "--classes", "3", "--seed", "4"],
    ));
    assert!(data.join("meta.json").is_file());

    let config = tmp.path().join("train.toml");
    fs::write(
        &config,
        format!(
            "max_iter = 6\nbatch_size = 2\nbase_lr = 0.01\nlog_interval = 2\neval_interval = 3\n\
             network.width = 4\nnetwork.decoder_width = 8\n\
             augment.crop_size = 16\n\
             data.layout = \"synthetic\"\ndata.root = {data_s:?}\ndata.labeled_ratio = 0.25\n"
        ),
    )
    .unwrap();
    let stdout = ok(&guidedmix(&runs, &["train", "--config", config.to_str().unwrap(), "--seed", "3"]));
    assert!(stdout.contains("final mIoU"), "{stdout}");
    let train_dir = only_run(&runs, "train-");
    assert!(train_dir.join("metrics.csv").is_file());
    let checkpoint = train_dir.join("checkpoints/last");
    let ckpt = checkpoint.to_str().unwrap();

    let stdout = ok(&guidedmix(&runs, &["eval", "--checkpoint", ckpt, "--data", data_s]));
    assert!(stdout.contains("mIoU"), "{stdout}");
    let eval_dir = only_run(&runs, "eval-");
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n_images"], 3);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
    assert_eq!(manifest["seed"], 3);

    ok(&guidedmix(&runs, &["export-preds", "--checkpoint", ckpt, "--data", data_s]));
    let pngs = fs::read_dir(only_run(&runs, "preds-"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 6);

    ok(&guidedmix(
        &runs,
        &["inspect-activations", "--checkpoint", ckpt, "--data", data_s, "--index", "1", "--lambda", "0.3"],
    ));
    let csv = fs::read_to_string(only_run(&runs, "activations-").join("activations.csv")).unwrap();
    assert!(csv.lines().count() > 2, "{csv}");

    let grid = tmp.path().join("grid.toml");
    fs::write(&grid, "pairing = [\"random\"]\nmitrans = [false]\ndecouple = [\"hard\"]\nseeds = [0]\nsuponly = false\n").unwrap();
    let stdout = ok(&guidedmix(
        &runs,
        &["ablate", "--grid", grid.to_str().unwrap(), "--config", config.to_str().unwrap()],
    ));
    assert!(stdout.contains("| random |"), "{stdout}");
    let table = fs::read_to_string(only_run(&runs, "ablate-").join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");

    let out = guidedmix(&runs, &["eval", "--checkpoint", "/nonexistent/ckpt", "--data", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint not found"));

    assert_eq!(guidedmix(&runs, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(guidedmix(&runs, &["train", "--seed", "x"]).status.code(), Some(2));
    assert_eq!(guidedmix(&runs, &["--help"]).status.code(), Some(0));

    let config = tmp.path().join("bad.toml");
    fs::write(&config, "max_iter = 5\nlearning_rate = 0.1\n").unwrap();
    let out = guidedmix(&runs, &["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!runs.exists());
}
