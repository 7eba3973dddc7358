//! Segmentation metrics, the ablation harness and model diagnostics.

mod ablation;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationGrid, AblationRow, AblationTable};

use crate::data::{write_colour_png, write_id_png, DatasetSplit, ImageSample, LabelMask, Normalization, IGNORE};
use crate::error::{ensure, Error, Result};
use crate::network::Network;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        ensure!(rows.iter().all(|r| r.len() == n), Validation, "confusion matrix must be square");
        Ok(ConfusionMatrix {
            num_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one image. Ground-truth `IGNORE` pixels are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &LabelMask) -> Result<()> {
        ensure!(
            pred.len() == gt.classes().len(),
            Validation,
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.classes().len()
        );
        let n = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt.classes()) {
            if g == IGNORE {
                continue;
            }
            ensure!(
                (p as usize) < n && (g as usize) < n,
                Validation,
                "class pair ({}, {}) out of range for {} classes",
                g,
                p,
                n
            );
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        ensure!(other.num_classes == self.num_classes, Validation, "cannot merge matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` when the class occurs in neither ground truth
    /// nor prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..n).map(|g| self.get(g, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.num_classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}

/// Mean IoU over classes with a non-zero denominator; an empty matrix gives 0.
pub fn miou(cm: &ConfusionMatrix) -> f64 {
    let ious: Vec<f64> = cm.per_class_iou().into_iter().flatten().collect();
    if ious.is_empty() {
        log::warn!("mIoU of an empty confusion matrix is undefined; reporting 0");
        return 0.0;
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    pub n_images: usize,
}

/// Whole-image prediction of class ids.
pub fn predict_mask(
    net: &Network,
    params: &ParamStore,
    norm: &Normalization,
    image: &ImageSample,
    use_mitrans: bool,
) -> Result<Vec<u8>> {
    let (logits, _) = net.full_forward(params, &norm.to_input(image), use_mitrans)?;
    Ok(logits.argmax())
}

/// mIoU over every labeled sample of `val`.
pub fn evaluate(net: &Network, params: &ParamStore, val: &DatasetSplit, use_mitrans: bool) -> Result<MetricsRecord> {
    ensure!(!val.labeled.is_empty(), Config, "the validation set is empty");
    let mut cm = ConfusionMatrix::new(val.num_classes());
    for sample in &val.labeled {
        let (image, mask) = sample.labeled(val.num_classes())?;
        let pred = predict_mask(net, params, &val.normalization, &image, use_mitrans)?;
        cm.accumulate(&pred, &mask)?;
    }
    for (c, iou) in cm.per_class_iou().iter().enumerate() {
        if iou.is_none() {
            log::debug!("class {} ({}) absent from ground truth and prediction", c, val.class_names[c]);
        }
    }
    Ok(MetricsRecord {
        miou: miou(&cm),
        per_class_iou: cm.per_class_iou(),
        pixel_accuracy: cm.pixel_accuracy(),
        n_images: val.labeled.len(),
    })
}

/// Mean post-activation value of every convolution layer for two inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationProfile {
    pub layers: Vec<String>,
    pub unlabeled: Vec<f64>,
    pub mixed: Vec<f64>,
}

impl ActivationProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,index,unlabeled,mixed\n");
        for (i, name) in self.layers.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", name, i, self.unlabeled[i], self.mixed[i]));
        }
        out
    }
}

fn layer_means(net: &Network, params: &ParamStore, input: &Tensor, use_mitrans: bool) -> Result<(Vec<String>, Vec<f64>)> {
    let mut tape = Tape::new(params);
    let x = tape.constant(crate::network::pad_to_stride(input));
    let f = net.forward(&mut tape, x, use_mitrans)?;
    Ok(f
        .conv_outputs
        .iter()
        .map(|(name, v)| (name.clone(), tape.value(*v).mean()))
        .unzip())
}

/// Per-layer mean activations of an unlabeled input and a mixed input, both
/// normalised `[3, H, W]` tensors.
pub fn mean_activation_profile(
    net: &Network,
    params: &ParamStore,
    unlabeled: &Tensor,
    mixed: &Tensor,
    use_mitrans: bool,
) -> Result<ActivationProfile> {
    let (layers, a) = layer_means(net, params, unlabeled, use_mitrans)?;
    let (_, b) = layer_means(net, params, mixed, use_mitrans)?;
    Ok(ActivationProfile {
        layers,
        unlabeled: a,
        mixed: b,
    })
}

/// Write `<id>.png` (class ids) and `<id>_color.png` (palette colours) per
/// image. Returns the written paths in order.
pub fn export_predictions(
    net: &Network,
    params: &ParamStore,
    norm: &Normalization,
    images: &[ImageSample],
    out_dir: &Path,
    palette: &[[u8; 3]],
    use_mitrans: bool,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(images.len() * 2);
    for image in images {
        let pred = predict_mask(net, params, norm, image, use_mitrans)?;
        let id_path = out_dir.join(format!("{}.png", image.id));
        let colour_path = out_dir.join(format!("{}_color.png", image.id));
        if let Some(parent) = id_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_id_png(&id_path, image.height(), image.width(), &pred)?;
        write_colour_png(&colour_path, image.height(), image.width(), &pred, palette)?;
        written.push(id_path);
        written.push(colour_path);
    }
    Ok(written)
}
