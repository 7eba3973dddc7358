//! Generate a small shapes dataset on disk and load it back with a 10%
//! labeled split.
//!
//! cargo run --example synthetic_dataset -- [out_dir]

use std::path::PathBuf;

use guidedmix::data::{
    generate_synthetic_dataset, load_dataset, DatasetLayout, LabeledSelection, LoadOptions, SplitName, SyntheticSpec,
};

fn main() -> guidedmix::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("guidedmix_synthetic"));
    let spec = SyntheticSpec::new(80, 32, 4, 0);
    generate_synthetic_dataset(&root, &spec)?;

    let selection = LabeledSelection::Ratio { ratio: 0.1, seed: 0 };
    let train = load_dataset(&root, &LoadOptions::new(DatasetLayout::Synthetic, SplitName::Train, selection.clone()))?;
    let val = load_dataset(&root, &LoadOptions::new(DatasetLayout::Synthetic, SplitName::Val, selection))?;
    println!("dataset at {}", root.display());
    println!("classes: {}", train.class_names.join(", "));
    println!(
        "train: {} labeled + {} unlabeled, val: {}",
        train.labeled.len(),
        train.unlabeled.len(),
        val.labeled.len()
    );

    let (image, mask) = train.labeled[0].labeled(train.num_classes())?;
    let mut counts = vec![0usize; train.num_classes()];
    for &c in mask.classes() {
        counts[c as usize] += 1;
    }
    println!("{} is {}x{}, pixels per class {:?}", image.id, image.height(), image.width(), counts);
    Ok(())
}
