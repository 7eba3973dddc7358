//! Confusion-matrix mIoU by hand, then the constant-background predictor
//! evaluated on a synthetic validation set.

use guidedmix::data::SyntheticSpec;
use guidedmix::evalkit::{miou, ConfusionMatrix};

fn main() -> guidedmix::Result<()> {
    let cm = ConfusionMatrix::from_counts(&[vec![1, 1], vec![0, 2]])?;
    println!("per-class IoU {:?}, mIoU {:.5}", cm.per_class_iou(), miou(&cm));

    let spec = SyntheticSpec::new(400, 32, 4, 7);
    let mut cm = ConfusionMatrix::new(4);
    for i in 400..500 {
        let (_, _, mask) = spec.sample(i);
        cm.accumulate(&vec![0u8; mask.classes().len()], &mask)?;
    }
    println!(
        "all-background: pixel accuracy {:.4}, mIoU {:.4}, per class {:?}",
        cm.pixel_accuracy(),
        miou(&cm),
        cm.per_class_iou()
    );
    Ok(())
}
