//! Images, masks, dataset splits and the semi-supervised batch stream.

mod augment;
mod batches;
mod layout;
mod synthetic;

use std::path::PathBuf;
use std::sync::Arc;

pub use augment::{augment, flip_horizontal, rescale, rotate, AugmentPolicy};
pub use batches::{make_batches, BatchStream, PairedBatch};
pub use layout::{
    cityscapes_palette, load_dataset, read_label_png, read_rgb_image, voc_palette, write_colour_png, write_id_png,
    write_palette_png, write_rgb_png, DatasetLayout, LabeledSelection, LoadOptions, SplitName, CITYSCAPES_CLASSES,
    VOC_CLASSES,
};
pub use synthetic::{generate_synthetic_dataset, ShapeKind, SyntheticScene, SyntheticShape, SyntheticSpec};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Mask value for pixels that carry no label.
pub const IGNORE: u8 = 255;

/// An RGB image with interleaved `H × W × 3` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, Validation, "image must be at least 1x1");
        ensure!(
            pixels.len() == height * width * 3,
            Validation,
            "image {}x{} needs {} values, got {}",
            height,
            width,
            height * width * 3,
            pixels.len()
        );
        ensure!(
            pixels.iter().all(|p| (0.0..=1.0).contains(p)),
            Validation,
            "pixel values must lie in [0, 1]"
        );
        Ok(ImageSample {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        ImageSample {
            id: id.into(),
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub(crate) fn from_raw(id: String, height: usize, width: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * 3);
        ImageSample {
            id,
            height,
            width,
            pixels,
        }
    }
}

/// Per-pixel class ids in `[0, C)` or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    num_classes: usize,
    classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, num_classes: usize, classes: Vec<u8>) -> Result<Self> {
        ensure!(
            classes.len() == height * width,
            Validation,
            "mask {}x{} needs {} values, got {}",
            height,
            width,
            height * width,
            classes.len()
        );
        ensure!(
            (2..=255).contains(&num_classes),
            Validation,
            "class count must be in [2, 255], got {}",
            num_classes
        );
        if let Some(bad) = classes.iter().find(|&&c| c != IGNORE && c as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "mask contains class id {bad} but only {num_classes} classes exist"
            )));
        }
        Ok(LabelMask {
            height,
            width,
            num_classes,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// Foreground classes (id ≥ 1) present in the mask, as a multi-hot
    /// vector of length `C − 1`.
    pub fn presence(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes - 1];
        for &c in &self.classes {
            if c != IGNORE && c >= 1 {
                out[c as usize - 1] = 1.0;
            }
        }
        out
    }

    pub(crate) fn from_raw(height: usize, width: usize, num_classes: usize, classes: Vec<u8>) -> Self {
        LabelMask {
            height,
            width,
            num_classes,
            classes,
        }
    }
}

/// Per-channel normalisation applied when turning an image into network input.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    /// Normalised `[3, H, W]` network input.
    pub fn to_input(&self, image: &ImageSample) -> Tensor {
        let (h, w) = (image.height, image.width);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            let (m, s) = (self.mean[c] as f64, self.std[c] as f64);
            for p in 0..h * w {
                data[c * h * w + p] = (image.pixels[p * 3 + c] as f64 - m) / s;
            }
        }
        Tensor::from_vec(&[3, h, w], data).expect("shape matches")
    }
}

#[derive(Clone, Debug)]
enum Source {
    Memory {
        image: Arc<ImageSample>,
        mask: Option<Arc<LabelMask>>,
    },
    Disk {
        image: PathBuf,
        mask: Option<PathBuf>,
    },
}

/// A dataset entry, held in memory or fetched from disk on demand.
#[derive(Clone, Debug)]
pub struct SampleRef {
    pub id: String,
    source: Source,
}

impl SampleRef {
    pub fn in_memory(image: ImageSample, mask: Option<LabelMask>) -> Self {
        SampleRef {
            id: image.id.clone(),
            source: Source::Memory {
                image: Arc::new(image),
                mask: mask.map(Arc::new),
            },
        }
    }

    pub(crate) fn on_disk(id: String, image: PathBuf, mask: Option<PathBuf>) -> Self {
        SampleRef {
            id,
            source: Source::Disk { image, mask },
        }
    }

    pub fn has_mask(&self) -> bool {
        match &self.source {
            Source::Memory { mask, .. } => mask.is_some(),
            Source::Disk { mask, .. } => mask.is_some(),
        }
    }

    pub fn image(&self) -> Result<ImageSample> {
        match &self.source {
            Source::Memory { image, .. } => Ok((**image).clone()),
            Source::Disk { image, .. } => read_rgb_image(image, &self.id),
        }
    }

    pub fn mask(&self, num_classes: usize) -> Result<Option<LabelMask>> {
        match &self.source {
            Source::Memory { mask, .. } => Ok(mask.as_deref().cloned()),
            Source::Disk { mask: Some(path), .. } => read_label_png(path, num_classes).map(Some),
            Source::Disk { mask: None, .. } => Ok(None),
        }
    }

    pub fn labeled(&self, num_classes: usize) -> Result<(ImageSample, LabelMask)> {
        let image = self.image()?;
        let mask = self
            .mask(num_classes)?
            .ok_or_else(|| Error::Format(format!("sample {} has no mask", self.id)))?;
        ensure!(
            (mask.height, mask.width) == (image.height, image.width),
            Format,
            "sample {}: mask {}x{} does not match image {}x{}",
            self.id,
            mask.height,
            mask.width,
            image.height,
            image.width
        );
        Ok((image, mask))
    }

    /// Load a disk-backed entry into memory.
    pub fn preload(&self, num_classes: usize) -> Result<SampleRef> {
        let image = self.image()?;
        let mask = self.mask(num_classes)?;
        if let Some(m) = &mask {
            ensure!(
                (m.height, m.width) == (image.height, image.width),
                Format,
                "sample {}: mask does not match image size",
                self.id
            );
        }
        Ok(SampleRef::in_memory(image, mask))
    }
}

/// Labeled and unlabeled pools of one dataset split.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<SampleRef>,
    pub unlabeled: Vec<SampleRef>,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
}

impl DatasetSplit {
    pub fn new(labeled: Vec<SampleRef>, unlabeled: Vec<SampleRef>, class_names: Vec<String>) -> Result<Self> {
        ensure!(
            class_names.len() >= 2,
            Validation,
            "need at least two classes (background included), got {}",
            class_names.len()
        );
        let ids: std::collections::HashSet<&str> = labeled.iter().map(|s| s.id.as_str()).collect();
        if let Some(dup) = unlabeled.iter().find(|s| ids.contains(s.id.as_str())) {
            return Err(Error::Validation(format!("{} is both labeled and unlabeled", dup.id)));
        }
        if let Some(s) = labeled.iter().find(|s| !s.has_mask()) {
            return Err(Error::Format(format!("labeled sample {} has no mask", s.id)));
        }
        Ok(DatasetSplit {
            labeled,
            unlabeled,
            class_names,
            normalization: Normalization::default(),
        })
    }

    pub fn from_memory(
        labeled: Vec<(ImageSample, LabelMask)>,
        unlabeled: Vec<ImageSample>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        Self::new(
            labeled.into_iter().map(|(i, m)| SampleRef::in_memory(i, Some(m))).collect(),
            unlabeled.into_iter().map(|i| SampleRef::in_memory(i, None)).collect(),
            class_names,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Drop every unlabeled sample (supervised-only training).
    pub fn without_unlabeled(mut self) -> Self {
        self.unlabeled.clear();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_unknown_classes_but_allows_ignore() {
        assert!(LabelMask::new(1, 3, 3, vec![0, 2, IGNORE]).is_ok());
        assert!(matches!(LabelMask::new(1, 2, 3, vec![0, 3]), Err(Error::Validation(_))));
    }

    #[test]
    fn presence_skips_background_and_ignore() {
        let m = LabelMask::new(1, 4, 4, vec![0, 3, IGNORE, 3]).unwrap();
        assert_eq!(m.presence(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn split_ids_must_be_disjoint() {
        let img = ImageSample::filled("a", 2, 2, [0.5; 3]);
        let mask = LabelMask::new(2, 2, 2, vec![0; 4]).unwrap();
        let names = vec!["bg".to_string(), "fg".to_string()];
        assert!(DatasetSplit::from_memory(vec![(img.clone(), mask)], vec![img], names).is_err());
    }

    #[test]
    fn normalization_maps_mean_to_zero() {
        let n = Normalization::default();
        let t = n.to_input(&ImageSample::filled("m", 2, 3, n.mean));
        assert!(t.data().iter().all(|v| v.abs() < 1e-7));
        assert_eq!(t.shape(), &[3, 2, 3]);
    }
}
