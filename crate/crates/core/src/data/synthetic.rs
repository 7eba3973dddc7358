//! Desk-scale substitute dataset: flat shapes on textured backgrounds,
//! written in the VOC directory layout.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layout::{write_palette_png, write_rgb_png, MetaFile};
use super::{ImageSample, LabelMask};
use crate::error::{ensure, Error, Result};
use crate::rng::{keyed, stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of training images.
    pub n_images: usize,
    /// Number of validation images.
    pub n_val: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_images: usize, image_size: usize, n_classes: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_images,
            n_val: (n_images / 4).max(1),
            image_size,
            n_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_images >= 1, Validation, "n_images must be at least 1");
        ensure!(
            (2..=255).contains(&self.n_classes),
            Validation,
            "n_classes must be in [2, 255] (class 0 is background), got {}",
            self.n_classes
        );
        ensure!(self.image_size >= 4, Validation, "image_size must be at least 4");
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|c| match c {
                0 => "background".to_string(),
                c if c <= ShapeKind::ALL.len() => ShapeKind::ALL[c - 1].name().to_string(),
                c => format!("shape_{c}"),
            })
            .collect()
    }

    pub fn train_id(i: usize) -> String {
        format!("syn_train_{i:05}")
    }

    pub fn val_id(i: usize) -> String {
        format!("syn_val_{i:05}")
    }

    /// Scene, image and mask for global sample index `index` (training
    /// images first, then validation images).
    pub fn sample(&self, index: usize) -> (SyntheticScene, ImageSample, LabelMask) {
        let mut rng = keyed(self.seed, &[stream::SYNTHETIC, index as u64]);
        let scene = SyntheticScene::random(self.image_size, self.n_classes, &mut rng);
        let id = if index < self.n_images {
            Self::train_id(index)
        } else {
            Self::val_id(index - self.n_images)
        };
        let image = scene.render(id, &mut rng);
        let mask = LabelMask::from_raw(self.image_size, self.image_size, self.n_classes, scene.rasterize());
        (scene, image, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
        }
    }

    /// Shape used to draw foreground class `class` (≥ 1).
    pub fn for_class(class: u8) -> ShapeKind {
        Self::ALL[(class as usize - 1) % Self::ALL.len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShape {
    pub kind: ShapeKind,
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Secondary extent: rectangle half-height, or rotation for triangles.
    pub aux: f64,
    pub color: [f32; 3],
}

impl SyntheticShape {
    /// Whether the point `(x, y)` (pixel units) lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Rectangle => dx.abs() <= r && dy.abs() <= self.aux,
            ShapeKind::Triangle => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = self.aux + k as f64 * std::f64::consts::TAU / 3.0;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                s.iter().all(|&t| t >= 0.0) || s.iter().all(|&t| t <= 0.0)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeKind::Cross => {
                let t = r / 3.0;
                (dx.abs() <= r && dy.abs() <= t) || (dy.abs() <= r && dx.abs() <= t)
            }
        }
    }

    fn covers_any_pixel(&self, size: usize) -> bool {
        (0..size).any(|y| (0..size).any(|x| self.contains(x as f64 + 0.5, y as f64 + 0.5)))
    }
}

/// The geometric content of one synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub size: usize,
    pub shapes: Vec<SyntheticShape>,
    background: Background,
}

#[derive(Clone, Debug, PartialEq)]
struct Background {
    base: [f32; 3],
    stripe: [f32; 3],
    freq: f64,
    angle: f64,
    phase: f64,
}

impl SyntheticScene {
    pub fn random(size: usize, n_classes: usize, rng: &mut Rng) -> Self {
        let background = Background {
            base: [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)],
            stripe: [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)],
            freq: rng.gen_range(0.15..0.6),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        let count = rng.gen_range(1..=3);
        let s = size as f64;
        let mut shapes = Vec::with_capacity(count);
        while shapes.len() < count {
            let class = rng.gen_range(1..n_classes) as u8;
            let kind = ShapeKind::for_class(class);
            let radius = rng.gen_range((0.12 * s).max(2.0)..(0.3 * s).max(2.5));
            let aux = match kind {
                ShapeKind::Rectangle => radius * rng.gen_range(0.5..1.0),
                ShapeKind::Triangle => rng.gen_range(0.0..std::f64::consts::TAU),
                _ => 0.0,
            };
            let shape = SyntheticShape {
                kind,
                class,
                cx: rng.gen_range(0.15 * s..0.85 * s),
                cy: rng.gen_range(0.15 * s..0.85 * s),
                radius,
                aux,
                color: class_color(class, n_classes, rng),
            };
            if shape.covers_any_pixel(size) {
                shapes.push(shape);
            }
        }
        SyntheticScene {
            size,
            shapes,
            background,
        }
    }

    /// Class of the topmost shape containing the pixel centre, else 0.
    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        self.shapes
            .iter()
            .rev()
            .find(|s| s.contains(px, py))
            .map_or(0, |s| s.class)
    }

    pub fn rasterize(&self) -> Vec<u8> {
        (0..self.size)
            .flat_map(|y| (0..self.size).map(move |x| (y, x)))
            .map(|(y, x)| self.class_at(y, x))
            .collect()
    }

    fn render(&self, id: String, rng: &mut Rng) -> ImageSample {
        let n = self.size;
        let bg = &self.background;
        let (ca, sa) = (bg.angle.cos(), bg.angle.sin());
        let mut pixels = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let wave = ((px * ca + py * sa) * bg.freq + bg.phase).sin() as f32;
                let top = self.shapes.iter().rev().find(|s| s.contains(px, py));
                for c in 0..3 {
                    let noise: f32 = rng.gen_range(-0.06..0.06);
                    let v = match top {
                        Some(s) => s.color[c] + 0.5 * noise,
                        None => bg.base[c] + bg.stripe[c] * wave + noise,
                    };
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
        ImageSample::from_raw(id, n, n, pixels)
    }
}

/// Saturated per-class hue with per-instance jitter, so colour is a strong
/// but imperfect cue next to geometry.
fn class_color(class: u8, n_classes: usize, rng: &mut Rng) -> [f32; 3] {
    let hue = 6.0 * (class as f32 - 1.0) / (n_classes as f32 - 1.0).max(1.0);
    let f = hue.fract();
    let (v, p, q, t) = (0.9, 0.15, 0.9 - 0.75 * f, 0.15 + 0.75 * f);
    let base = match hue as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    base.map(|c| (c + rng.gen_range(-0.15f32..0.15)).clamp(0.0, 1.0))
}

/// Write a synthetic dataset in the VOC layout under `root`:
/// `JPEGImages/<id>.png`, `SegmentationClass/<id>.png` (palette PNG),
/// `ImageSets/Segmentation/{train,val}.txt` and `meta.json`.
pub fn generate_synthetic_dataset(root: &Path, spec: &SyntheticSpec) -> Result<()> {
    spec.validate()?;
    let images = root.join("JPEGImages");
    let masks = root.join("SegmentationClass");
    let sets = root.join("ImageSets").join("Segmentation");
    for d in [&images, &masks, &sets] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut train_ids = String::new();
    let mut val_ids = String::new();
    for index in 0..spec.n_images + spec.n_val {
        let (_, image, mask) = spec.sample(index);
        write_rgb_png(&images.join(format!("{}.png", image.id)), &image)?;
        write_palette_png(&masks.join(format!("{}.png", image.id)), &mask)?;
        let list = if index < spec.n_images { &mut train_ids } else { &mut val_ids };
        list.push_str(&image.id);
        list.push('\n');
    }
    for (name, text) in [("train.txt", &train_ids), ("val.txt", &val_ids)] {
        let p = sets.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    let meta = MetaFile {
        layout: "synthetic".into(),
        class_names: spec.class_names(),
        generator: Some(spec.clone()),
    };
    let p = root.join("meta.json");
    fs::write(&p, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(|e| Error::io(&p, e))?;
    log::info!(
        "wrote {} train + {} val synthetic images to {}",
        spec.n_images,
        spec.n_val,
        root.display()
    );
    Ok(())
}
