//! On-disk dataset layouts and PNG I/O.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use super::{DatasetSplit, ImageSample, LabelMask, SampleRef};
use crate::error::{ensure, Error, Result};
use crate::rng::{keyed, stream};

pub const VOC_CLASSES: [&str; 21] = [
    "background",
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetLayout {
    Voc,
    Cityscapes,
    Synthetic,
}

impl std::str::FromStr for DatasetLayout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "voc" => Ok(DatasetLayout::Voc),
            "cityscapes" => Ok(DatasetLayout::Cityscapes),
            "synthetic" => Ok(DatasetLayout::Synthetic),
            other => Err(format!("unknown layout {other:?} (expected voc, cityscapes or synthetic)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
        }
    }
}

/// How the labeled subset of a training split is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum LabeledSelection {
    /// A fraction of the ids, drawn with a seeded shuffle.
    Ratio { ratio: f64, seed: u64 },
    /// Exactly these ids.
    Ids(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub layout: DatasetLayout,
    pub split: SplitName,
    pub selection: LabeledSelection,
    /// Decode every sample up front instead of on demand.
    pub preload: bool,
}

impl LoadOptions {
    pub fn new(layout: DatasetLayout, split: SplitName, selection: LabeledSelection) -> Self {
        LoadOptions {
            layout,
            split,
            selection,
            preload: true,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct MetaFile {
    pub layout: String,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub generator: Option<SyntheticSpec>,
}

struct Entry {
    id: String,
    image: PathBuf,
    mask: Option<PathBuf>,
}

/// Load one split of a dataset directory.
///
/// The validation split is returned fully labeled. For the training split the
/// ids are partitioned into labeled and unlabeled pools by `selection`.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<DatasetSplit> {
    ensure!(root.is_dir(), Format, "dataset root {} does not exist", root.display());
    let (class_names, entries) = match opts.layout {
        DatasetLayout::Voc => (
            VOC_CLASSES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            voc_entries(root, opts.split)?,
        ),
        DatasetLayout::Synthetic => {
            let p = root.join("meta.json");
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let meta: MetaFile =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            (meta.class_names, voc_entries(root, opts.split)?)
        }
        DatasetLayout::Cityscapes => (
            CITYSCAPES_CLASSES.iter().map(|s| s.to_string()).collect(),
            cityscapes_entries(root, opts.split)?,
        ),
    };
    ensure!(!entries.is_empty(), Format, "no {} samples under {}", opts.split.as_str(), root.display());
    let num_classes = class_names.len();

    let labeled_ids: std::collections::HashSet<String> = match opts.split {
        SplitName::Val => entries.iter().map(|e| e.id.clone()).collect(),
        SplitName::Train => select_labeled(&entries, &opts.selection)?,
    };

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for e in entries {
        if labeled_ids.contains(&e.id) {
            let mask = e
                .mask
                .filter(|m| m.is_file())
                .ok_or_else(|| Error::Format(format!("missing mask for labeled sample {}", e.id)))?;
            labeled.push(SampleRef::on_disk(e.id, e.image, Some(mask)));
        } else {
            unlabeled.push(SampleRef::on_disk(e.id, e.image, None));
        }
    }
    if opts.preload {
        labeled = labeled.iter().map(|s| s.preload(num_classes)).collect::<Result<_>>()?;
        unlabeled = unlabeled.iter().map(|s| s.preload(num_classes)).collect::<Result<_>>()?;
    }
    DatasetSplit::new(labeled, unlabeled, class_names)
}

fn select_labeled(entries: &[Entry], selection: &LabeledSelection) -> Result<std::collections::HashSet<String>> {
    match selection {
        LabeledSelection::Ratio { ratio, seed } => {
            ensure!(
                *ratio > 0.0 && *ratio <= 1.0,
                Config,
                "labeled ratio must be in (0, 1], got {}",
                ratio
            );
            let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
            ids.sort_unstable();
            ids.shuffle(&mut keyed(*seed, &[stream::SPLIT]));
            let n = ((ratio * ids.len() as f64).round() as usize).clamp(1, ids.len());
            Ok(ids[..n].iter().map(|s| s.to_string()).collect())
        }
        LabeledSelection::Ids(list) => {
            let known: std::collections::HashSet<&str> = entries.iter().map(|e| e.id.as_str()).collect();
            for id in list {
                ensure!(known.contains(id.as_str()), Format, "labeled id {} is not in the split", id);
            }
            Ok(list.iter().cloned().collect())
        }
    }
}

fn voc_entries(root: &Path, split: SplitName) -> Result<Vec<Entry>> {
    let list = root
        .join("ImageSets")
        .join("Segmentation")
        .join(format!("{}.txt", split.as_str()));
    let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let jpg = root.join("JPEGImages").join(format!("{id}.jpg"));
            let image = if jpg.is_file() {
                jpg
            } else {
                root.join("JPEGImages").join(format!("{id}.png"))
            };
            ensure!(image.is_file(), Format, "missing image for {}", id);
            let mask = root.join("SegmentationClass").join(format!("{id}.png"));
            Ok(Entry {
                id: id.to_string(),
                image,
                mask: Some(mask),
            })
        })
        .collect()
}

fn cityscapes_entries(root: &Path, split: SplitName) -> Result<Vec<Entry>> {
    const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
    let image_root = root.join("leftImg8bit").join(split.as_str());
    ensure!(image_root.is_dir(), Format, "missing {}", image_root.display());
    let mut entries = Vec::new();
    for item in walkdir::WalkDir::new(&image_root).sort_by_file_name() {
        let item = item.map_err(|e| Error::Format(e.to_string()))?;
        let name = item.file_name().to_string_lossy();
        let Some(stem) = name.strip_suffix(IMAGE_SUFFIX) else { continue };
        let rel_dir = item
            .path()
            .parent()
            .and_then(|p| p.strip_prefix(&image_root).ok())
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let id = rel_dir.join(stem).to_string_lossy().replace('\\', "/");
        let mask = root
            .join("gtFine")
            .join(split.as_str())
            .join(&rel_dir)
            .join(format!("{stem}_gtFine_labelTrainIds.png"));
        entries.push(Entry {
            id,
            image: item.path().to_path_buf(),
            mask: Some(mask),
        });
    }
    Ok(entries)
}

pub fn read_rgb_image(path: &Path, id: &str) -> Result<ImageSample> {
    let img = image::open(path)
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(ImageSample::from_raw(id.to_string(), h as usize, w as usize, pixels))
}

/// Read a class-id PNG (palette or 8-bit grayscale); index values are the ids.
pub fn read_label_png(path: &Path, num_classes: usize) -> Result<LabelMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let codec = |e: png::DecodingError| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(codec)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(codec)?;
    ensure!(
        info.bit_depth == png::BitDepth::Eight
            && matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale),
        Format,
        "{}: expected an 8-bit palette or grayscale mask, got {:?} {:?}",
        path.display(),
        info.color_type,
        info.bit_depth
    );
    let (w, h) = (info.width as usize, info.height as usize);
    let mut classes = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        classes.extend_from_slice(&row[..w]);
    }
    LabelMask::new(h, w, num_classes, classes)
        .map_err(|e| Error::Validation(format!("{}: {}", path.display(), e)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let codec = |e: png::EncodingError| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(codec)?;
    writer.write_image_data(data).map_err(codec)?;
    writer.finish().map_err(codec)
}

pub fn write_rgb_png(path: &Path, image: &ImageSample) -> Result<()> {
    let data: Vec<u8> = image.pixels().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    encode(path, image.width(), image.height(), png::ColorType::Rgb, None, &data)
}

/// Indexed-colour mask PNG using the VOC palette (index 255 included).
pub fn write_palette_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let palette: Vec<u8> = voc_palette(256).into_iter().flatten().collect();
    encode(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Indexed,
        Some(palette),
        mask.classes(),
    )
}

/// 8-bit grayscale PNG of raw class ids.
pub fn write_id_png(path: &Path, height: usize, width: usize, ids: &[u8]) -> Result<()> {
    encode(path, width, height, png::ColorType::Grayscale, None, ids)
}

/// RGB PNG of class ids mapped through `palette` (white for unknown ids).
pub fn write_colour_png(path: &Path, height: usize, width: usize, ids: &[u8], palette: &[[u8; 3]]) -> Result<()> {
    let data: Vec<u8> = ids
        .iter()
        .flat_map(|&c| palette.get(c as usize).copied().unwrap_or([255, 255, 255]))
        .collect();
    encode(path, width, height, png::ColorType::Rgb, None, &data)
}

/// Standard VOC colour map: bits of the class id interleaved into RGB.
pub fn voc_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let mut c = i;
            let mut rgb = [0u8; 3];
            for j in 0..8 {
                for (k, v) in rgb.iter_mut().enumerate() {
                    *v |= (((c >> k) & 1) as u8) << (7 - j);
                }
                c >>= 3;
            }
            rgb
        })
        .collect()
}

/// Colours of the 19 Cityscapes train ids.
pub fn cityscapes_palette() -> Vec<[u8; 3]> {
    vec![
        [128, 64, 128],
        [244, 35, 232],
        [70, 70, 70],
        [102, 102, 156],
        [190, 153, 153],
        [153, 153, 153],
        [250, 170, 30],
        [220, 220, 0],
        [107, 142, 35],
        [152, 251, 152],
        [70, 130, 180],
        [220, 20, 60],
        [255, 0, 0],
        [0, 0, 142],
        [0, 0, 70],
        [0, 60, 100],
        [0, 80, 100],
        [0, 0, 230],
        [119, 11, 32],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voc_palette_head() {
        let p = voc_palette(256);
        assert_eq!(p[0], [0, 0, 0]);
        assert_eq!(p[1], [128, 0, 0]);
        assert_eq!(p[2], [0, 128, 0]);
        assert_eq!(p[15], [192, 128, 128]);
        assert_eq!(p[255], [224, 224, 192]);
    }

    #[test]
    fn label_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = LabelMask::new(2, 3, 21, vec![0, 1, 20, 255, 7, 0]).unwrap();
        let p = dir.path().join("m.png");
        write_palette_png(&p, &mask).unwrap();
        assert_eq!(read_label_png(&p, 21).unwrap(), mask);
        let g = dir.path().join("g.png");
        write_id_png(&g, 2, 3, mask.classes()).unwrap();
        assert_eq!(read_label_png(&g, 21).unwrap(), mask);
        assert!(matches!(read_label_png(&g, 8), Err(Error::Validation(_))));
    }
}
