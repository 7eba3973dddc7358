//! Train on an in-memory shapes set with 40 labeled and 360 unlabeled
//! images and print the loss curve.
//!
//! cargo run --release --example train_toy -- [iterations]

use guidedmix::data::{AugmentPolicy, DatasetSplit, SyntheticSpec};
use guidedmix::training::{train, TrainConfig, TrainData};

fn main() -> guidedmix::Result<()> {
    let iters: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(600);
    let spec = SyntheticSpec::new(400, 32, 4, 7);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for i in 0..400 {
        let (_, image, mask) = spec.sample(i);
        if i < 40 {
            labeled.push((image, mask));
        } else {
            unlabeled.push(image);
        }
    }
    let val = (400..500).map(|i| {
        let (_, image, mask) = spec.sample(i);
        (image, mask)
    });
    let data = TrainData {
        train: DatasetSplit::from_memory(labeled, unlabeled, spec.class_names())?,
        val: DatasetSplit::from_memory(val.collect(), Vec::new(), spec.class_names())?,
    };
    let cfg = TrainConfig {
        base_lr: 0.01,
        max_iter: iters,
        batch_size: 4,
        eval_interval: Some((iters / 3).max(1)),
        log_interval: (iters / 12).max(1),
        augment: AugmentPolicy {
            crop_size: 32,
            scale_min: 0.75,
            scale_max: 1.5,
            ..AugmentPolicy::default()
        },
        ..TrainConfig::default()
    };
    let outcome = train(&cfg, &data, None)?;
    println!("{:>6} {:>8} {:>8} {:>8} {:>8} {:>6} {:>8}", "iter", "l_ce", "l_dec", "l_cla", "l_usup", "ω", "mIoU");
    for row in &outcome.history {
        let miou = row.val_miou.map_or(String::new(), |m| format!("{m:.4}"));
        println!(
            "{:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6.3} {:>8}",
            row.iter, row.l_ce, row.l_dec, row.l_cla, row.l_usup, row.omega, miou
        );
    }
    Ok(())
}
