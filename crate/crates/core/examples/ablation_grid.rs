//! A small ablation: supervised-only against hard and soft decoupling over
//! two seeds, printed as a Markdown table.

use guidedmix::data::{AugmentPolicy, DatasetSplit, SyntheticSpec};
use guidedmix::evalkit::{run_ablation, AblationGrid};
use guidedmix::pairing::PairingStrategy;
use guidedmix::pmg::DecoupleMode;
use guidedmix::training::{TrainConfig, TrainData};

fn main() -> guidedmix::Result<()> {
    let spec = SyntheticSpec::new(120, 32, 3, 11);
    let samples: Vec<_> = (0..150).map(|i| spec.sample(i)).collect();
    let labeled = samples[..12].iter().map(|(_, i, m)| (i.clone(), m.clone())).collect();
    let unlabeled = samples[12..120].iter().map(|(_, i, _)| i.clone()).collect();
    let val = samples[120..].iter().map(|(_, i, m)| (i.clone(), m.clone())).collect();
    let data = TrainData {
        train: DatasetSplit::from_memory(labeled, unlabeled, spec.class_names())?,
        val: DatasetSplit::from_memory(val, Vec::new(), spec.class_names())?,
    };
    let base = TrainConfig {
        base_lr: 0.01,
        max_iter: 150,
        batch_size: 2,
        log_interval: 50,
        augment: AugmentPolicy::crop_only(32),
        ..TrainConfig::default()
    };
    let grid = AblationGrid {
        pairing: vec![PairingStrategy::Similar],
        mitrans: vec![true],
        decouple: vec![DecoupleMode::Hard, DecoupleMode::Soft],
        seeds: vec![0, 1],
        ..AblationGrid::default()
    };
    let table = run_ablation(&grid, &base, &data, None)?;
    print!("{}", table.to_csv());
    println!();
    print!("{}", table.to_markdown());
    Ok(())
}
