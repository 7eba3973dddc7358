//! Geometric augmentation applied identically to an image (bilinear) and its
//! mask (nearest neighbour).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ImageSample, LabelMask, IGNORE};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_size: usize,
    pub hflip_prob: f64,
    pub rotation_deg: f64,
    pub rotation_prob: f64,
    pub enable_scale: bool,
    pub enable_flip: bool,
    pub enable_rotation: bool,
    /// Image fill for padding and rotation borders (the dataset mean).
    pub fill: [f32; 3],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            scale_min: 0.5,
            scale_max: 2.0,
            crop_size: 321,
            hflip_prob: 0.5,
            rotation_deg: 10.0,
            rotation_prob: 0.5,
            enable_scale: true,
            enable_flip: true,
            enable_rotation: true,
            fill: [0.485, 0.456, 0.406],
        }
    }
}

impl AugmentPolicy {
    /// Crop only.
    pub fn crop_only(crop_size: usize) -> Self {
        AugmentPolicy {
            crop_size,
            enable_scale: false,
            enable_flip: false,
            enable_rotation: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        crate::error::ensure!(
            self.scale_min > 0.0 && self.scale_max >= self.scale_min,
            Config,
            "augment scale range must be positive and ordered, got [{}, {}]",
            self.scale_min,
            self.scale_max
        );
        crate::error::ensure!(self.crop_size >= 1, Config, "augment.crop_size must be at least 1");
        Ok(())
    }
}

fn sample_bilinear(img: &ImageSample, sy: f64, sx: f64, fill: [f32; 3]) -> [f32; 3] {
    let (h, w) = (img.height() as f64, img.width() as f64);
    if sy < -0.5 || sx < -0.5 || sy > h - 0.5 || sx > w - 0.5 {
        return fill;
    }
    let sy = sy.clamp(0.0, h - 1.0);
    let sx = sx.clamp(0.0, w - 1.0);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
    let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
    let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k]);
    }
    out
}

/// Resize by `scale` (output side `round(side·scale)`, at least 1).
pub fn rescale(image: &ImageSample, mask: Option<&LabelMask>, scale: f64) -> (ImageSample, Option<LabelMask>) {
    let (h, w) = (image.height(), image.width());
    let oh = ((h as f64 * scale).round() as usize).max(1);
    let ow = ((w as f64 * scale).round() as usize).max(1);
    let (ry, rx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut pixels = Vec::with_capacity(oh * ow * 3);
    for y in 0..oh {
        for x in 0..ow {
            let sy = (y as f64 + 0.5) * ry - 0.5;
            let sx = (x as f64 + 0.5) * rx - 0.5;
            pixels.extend(sample_bilinear(image, sy.max(0.0), sx.max(0.0), [0.0; 3]));
        }
    }
    let new_mask = mask.map(|m| {
        let classes = (0..oh)
            .flat_map(|y| (0..ow).map(move |x| (y, x)))
            .map(|(y, x)| {
                let sy = (((y as f64 + 0.5) * ry) as usize).min(h - 1);
                let sx = (((x as f64 + 0.5) * rx) as usize).min(w - 1);
                m.get(sy, sx)
            })
            .collect();
        LabelMask::from_raw(oh, ow, m.num_classes(), classes)
    });
    (ImageSample::from_raw(image.id.clone(), oh, ow, pixels), new_mask)
}

/// Rotate about the image centre by `degrees`; uncovered pixels take `fill`
/// (image) or [`IGNORE`] (mask).
pub fn rotate(
    image: &ImageSample,
    mask: Option<&LabelMask>,
    degrees: f64,
    fill: [f32; 3],
) -> (ImageSample, Option<LabelMask>) {
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    // output pixel centre -> source continuous coordinate
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        (c * dy - s * dx + cy, s * dy + c * dx + cx)
    };
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x);
            pixels.extend(sample_bilinear(image, sy - 0.5, sx - 0.5, fill));
        }
    }
    let new_mask = mask.map(|m| {
        let mut classes = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source(y, x);
                let v = if sy >= 0.0 && sx >= 0.0 && sy < h as f64 && sx < w as f64 {
                    m.get(sy as usize, sx as usize)
                } else {
                    IGNORE
                };
                classes.push(v);
            }
        }
        LabelMask::from_raw(h, w, m.num_classes(), classes)
    });
    (ImageSample::from_raw(image.id.clone(), h, w, pixels), new_mask)
}

pub fn flip_horizontal(image: &ImageSample, mask: Option<&LabelMask>) -> (ImageSample, Option<LabelMask>) {
    let (h, w) = (image.height(), image.width());
    let pixels = (0..h)
        .flat_map(|y| (0..w).rev().map(move |x| (y, x)))
        .flat_map(|(y, x)| image.pixel(y, x))
        .collect();
    let new_mask = mask.map(|m| {
        let classes = (0..h)
            .flat_map(|y| (0..w).rev().map(move |x| m.get(y, x)))
            .collect();
        LabelMask::from_raw(h, w, m.num_classes(), classes)
    });
    (ImageSample::from_raw(image.id.clone(), h, w, pixels), new_mask)
}

/// Pad to at least `size × size` (image with `fill`, mask with IGNORE) and
/// cut a `size × size` window at `(top, left)`.
fn pad_crop(
    image: &ImageSample,
    mask: Option<&LabelMask>,
    size: usize,
    top: usize,
    left: usize,
    fill: [f32; 3],
) -> (ImageSample, Option<LabelMask>) {
    let (h, w) = (image.height(), image.width());
    let mut pixels = Vec::with_capacity(size * size * 3);
    let mut classes = Vec::with_capacity(size * size);
    for y in top..top + size {
        for x in left..left + size {
            let inside = y < h && x < w;
            pixels.extend(if inside { image.pixel(y, x) } else { fill });
            if let Some(m) = mask {
                classes.push(if inside { m.get(y, x) } else { IGNORE });
            }
        }
    }
    (
        ImageSample::from_raw(image.id.clone(), size, size, pixels),
        mask.map(|m| LabelMask::from_raw(size, size, m.num_classes(), classes)),
    )
}

/// Random scale, rotation and flip followed by a `crop_size²` crop.
pub fn augment(
    image: &ImageSample,
    mask: Option<&LabelMask>,
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> (ImageSample, Option<LabelMask>) {
    let mut img = image.clone();
    let mut m = mask.cloned();
    if policy.enable_scale {
        let s = rng.gen_range(policy.scale_min..=policy.scale_max);
        (img, m) = rescale(&img, m.as_ref(), s);
    }
    if policy.enable_rotation && rng.gen_bool(policy.rotation_prob.clamp(0.0, 1.0)) {
        let deg = rng.gen_range(-policy.rotation_deg..=policy.rotation_deg);
        (img, m) = rotate(&img, m.as_ref(), deg, policy.fill);
    }
    if policy.enable_flip && rng.gen_bool(policy.hflip_prob.clamp(0.0, 1.0)) {
        (img, m) = flip_horizontal(&img, m.as_ref());
    }
    let size = policy.crop_size;
    let top = if img.height() > size { rng.gen_range(0..=img.height() - size) } else { 0 };
    let left = if img.width() > size { rng.gen_range(0..=img.width() - size) } else { 0 };
    pad_crop(&img, m.as_ref(), size, top, left, policy.fill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;
    use proptest::prelude::*;

    fn single_pixel(h: usize, w: usize, r: usize, c: usize) -> (ImageSample, LabelMask) {
        let mut px = vec![0.0f32; h * w * 3];
        let mut cls = vec![0u8; h * w];
        px[(r * w + c) * 3] = 1.0;
        cls[r * w + c] = 1;
        (
            ImageSample::new("p", h, w, px).unwrap(),
            LabelMask::new(h, w, 2, cls).unwrap(),
        )
    }

    #[test]
    fn hflip_reflects_columns() {
        let (img, mask) = single_pixel(5, 7, 2, 1);
        let (fi, fm) = flip_horizontal(&img, Some(&mask));
        let fm = fm.unwrap();
        assert_eq!(fm.get(2, 7 - 1 - 1), 1);
        assert_eq!(fm.classes().iter().filter(|&&c| c == 1).count(), 1);
        assert_eq!(fi.pixel(2, 5)[0], 1.0);
    }

    #[test]
    fn disabled_policy_with_full_crop_is_identity() {
        let (img, mask) = single_pixel(6, 6, 3, 4);
        let policy = AugmentPolicy::crop_only(6);
        let (oi, om) = augment(&img, Some(&mask), &policy, &mut keyed(0, &[]));
        assert_eq!(oi, img);
        assert_eq!(om.unwrap(), mask);
    }

    #[test]
    fn scale_two_doubles_size_and_maps_corners() {
        // corner oracle: output pixel (y, x) samples source floor((y + 0.5) / 2)
        let h = 64;
        let cls: Vec<u8> = (0..h * h).map(|i| ((i / h) % 2 * 2 + (i % h) % 2) as u8).collect();
        let mask = LabelMask::new(h, h, 4, cls).unwrap();
        let img = ImageSample::filled("s", h, h, [0.5; 3]);
        let (oi, om) = rescale(&img, Some(&mask), 2.0);
        let om = om.unwrap();
        assert_eq!((oi.height(), oi.width()), (128, 128));
        for &(y, x) in &[(0, 0), (0, 127), (127, 0), (127, 127), (1, 2), (64, 63)] {
            let (sy, sx) = ((y as f64 + 0.5) / 2.0, (x as f64 + 0.5) / 2.0);
            assert_eq!(om.get(y, x), mask.get(sy as usize, sx as usize));
        }
    }

    #[test]
    fn crop_pads_with_fill_and_ignore() {
        let img = ImageSample::filled("small", 2, 2, [1.0; 3]);
        let mask = LabelMask::new(2, 2, 2, vec![1; 4]).unwrap();
        let policy = AugmentPolicy::crop_only(4);
        let (oi, om) = augment(&img, Some(&mask), &policy, &mut keyed(0, &[]));
        let om = om.unwrap();
        assert_eq!(om.get(3, 3), IGNORE);
        assert_eq!(om.get(1, 1), 1);
        assert_eq!(oi.pixel(3, 3), policy.fill);
    }

    /// Image channels carry source coordinates; the mask carries a coarse
    /// cell index. After any transform each labeled output pixel must decode
    /// to a source position inside (or next to) the cell its mask names.
    fn coordinate_pair(n: usize) -> (ImageSample, LabelMask) {
        let mut px = Vec::with_capacity(n * n * 3);
        let mut cls = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                px.extend([(y as f32 + 0.5) / n as f32, (x as f32 + 0.5) / n as f32, 1.0]);
                cls.push(((y / 4) * (n / 4) + x / 4) as u8);
            }
        }
        (
            ImageSample::new("grid", n, n, px).unwrap(),
            LabelMask::new(n, n, (n / 4) * (n / 4), cls).unwrap(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn image_and_mask_transforms_agree(seed in 0u64..10_000, crop in 10usize..40) {
            let n = 32;
            let (img, mask) = coordinate_pair(n);
            let policy = AugmentPolicy { crop_size: crop, fill: [0.0; 3], ..AugmentPolicy::default() };
            let (oi, om) = augment(&img, Some(&mask), &policy, &mut keyed(seed, &[1]));
            let om = om.unwrap();
            prop_assert_eq!((oi.height(), oi.width()), (crop, crop));
            for y in 0..crop {
                for x in 0..crop {
                    let c = om.get(y, x);
                    if c == IGNORE { continue; }
                    prop_assert!((c as usize) < mask.num_classes());
                    let p = oi.pixel(y, x);
                    if p[2] < 0.999 { continue; } // blended with the border fill
                    let (sy, sx) = (p[0] as f64 * n as f64, p[1] as f64 * n as f64);
                    let (cy, cx) = ((c as usize / (n / 4)) * 4, (c as usize % (n / 4)) * 4);
                    // nearest-neighbour rounding plus bilinear smoothing across scales
                    let tol = 2.5;
                    prop_assert!(sy >= cy as f64 - tol && sy <= cy as f64 + 4.0 + tol, "row {} vs cell {}", sy, cy);
                    prop_assert!(sx >= cx as f64 - tol && sx <= cx as f64 + 4.0 + tol, "col {} vs cell {}", sx, cx);
                }
            }
        }

        #[test]
        fn augmented_mask_values_stay_in_original_set(seed in 0u64..10_000) {
            let spec = crate::data::SyntheticSpec::new(1, 24, 4, seed);
            let (_, img, mask) = spec.sample(0);
            let policy = AugmentPolicy { crop_size: 20, ..AugmentPolicy::default() };
            let (_, om) = augment(&img, Some(&mask), &policy, &mut keyed(seed, &[2]));
            let before: std::collections::HashSet<u8> = mask.classes().iter().copied().collect();
            for c in om.unwrap().classes() {
                prop_assert!(before.contains(c) || *c == IGNORE);
            }
        }
    }
}
