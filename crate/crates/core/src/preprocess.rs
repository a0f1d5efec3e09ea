//! Loading, square padding, bilinear resizing and paired augmentation.
//!
//! Augmentation draws one [`AugmentTransform`] per sample and applies it to
//! both the input and the reference image, so the pair stays aligned.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_tensor::{ImageTensor, CHANNELS};

/// Value of a black pixel after normalization.
pub const BLACK: f32 = -1.0;

/// Loads an 8-bit RGB raster and pads it to a square with equal black borders
/// (top and bottom for landscape images, left and right for portrait).
pub fn load_and_pad(path: &Path) -> Result<ImageTensor> {
    Ok(pad_to_square(&ImageTensor::load(path)?))
}

pub fn pad_to_square(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    if h == w {
        return img.clone();
    }
    let side = h.max(w);
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    let mut out = vec![BLACK; CHANNELS * side * side];
    for c in 0..CHANNELS {
        for y in 0..h {
            let dst = (c * side + y + top) * side + left;
            let src = (c * h + y) * w;
            out[dst..dst + w].copy_from_slice(&img.data()[src..src + w]);
        }
    }
    ImageTensor::new(side, side, out).expect("padding preserves range")
}

/// Bilinear resampling with pixel-center alignment (no corner alignment).
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    if h == out_h && w == out_w {
        return img.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Vec::with_capacity(CHANNELS * out_h * out_w);
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    ImageTensor::from_clamped(out_h, out_w, out).expect("resize preserves shape")
}

pub fn crop(img: &ImageTensor, top: usize, left: usize, height: usize, width: usize) -> ImageTensor {
    assert!(top + height <= img.height() && left + width <= img.width());
    let mut out = Vec::with_capacity(CHANNELS * height * width);
    for c in 0..CHANNELS {
        for y in top..top + height {
            let row = (c * img.height() + y) * img.width();
            out.extend_from_slice(&img.data()[row + left..row + left + width]);
        }
    }
    ImageTensor::new(height, width, out).expect("crop preserves range")
}

fn remap(img: &ImageTensor, flip_rows: bool, flip_cols: bool) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..CHANNELS {
        for y in 0..h {
            let sy = if flip_rows { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if flip_cols { w - 1 - x } else { x };
                out.push(img.get(c, sy, sx));
            }
        }
    }
    ImageTensor::new(h, w, out).expect("remap preserves range")
}

/// Mirror across the vertical axis.
pub fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    remap(img, false, true)
}

/// Mirror across the horizontal axis.
pub fn flip_vertical(img: &ImageTensor) -> ImageTensor {
    remap(img, true, false)
}

/// Pixel (i, j) moves to (H-1-i, W-1-j).
pub fn rotate_180(img: &ImageTensor) -> ImageTensor {
    remap(img, true, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlipSet {
    pub horizontal: bool,
    pub vertical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub target_size: usize,
    pub random_crop: bool,
    /// Crop side as a fraction of the source side, sampled uniformly in this range.
    pub crop_scale: (f64, f64),
    pub flips: FlipSet,
    /// Allowed rotations in degrees; only 0 and 180 keep plant rows vertical.
    pub rotations_deg: Vec<u32>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_size: 256,
            random_crop: true,
            crop_scale: (0.8, 1.0),
            flips: FlipSet {
                horizontal: true,
                vertical: true,
            },
            rotations_deg: vec![0, 180],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Resize only.
    pub fn resize_only(target_size: usize) -> Self {
        AugmentConfig {
            target_size,
            random_crop: false,
            flips: FlipSet::default(),
            rotations_deg: vec![0],
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("augment target_size must be positive".into()));
        }
        if self.rotations_deg.is_empty() {
            return Err(Error::Config("augment rotations_deg must not be empty".into()));
        }
        if let Some(bad) = self.rotations_deg.iter().find(|r| **r != 0 && **r != 180) {
            return Err(Error::Config(format!(
                "rotation {bad} deg not allowed; rotations are limited to 0 and 180"
            )));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        Ok(())
    }
}

/// One sampled geometric transform: crop, then resize, then flips, then rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentTransform {
    /// (top, left, side) of the square crop window in source pixels.
    pub crop: Option<(usize, usize, usize)>,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotation_deg: u32,
}

impl AugmentTransform {
    pub fn sample<R: Rng + ?Sized>(
        config: &AugmentConfig,
        source_side: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if config.target_size > source_side {
            return Err(Error::Config(format!(
                "target size {} exceeds padded source side {source_side}",
                config.target_size
            )));
        }
        let crop = if config.random_crop {
            let (lo, hi) = config.crop_scale;
            let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let side = ((scale * source_side as f64).round() as usize).clamp(1, source_side);
            let top = rng.random_range(0..=source_side - side);
            let left = rng.random_range(0..=source_side - side);
            Some((top, left, side))
        } else {
            None
        };
        let flip_horizontal = config.flips.horizontal && rng.random_bool(0.5);
        let flip_vertical = config.flips.vertical && rng.random_bool(0.5);
        let rotation_deg = config.rotations_deg[rng.random_range(0..config.rotations_deg.len())];
        Ok(AugmentTransform {
            crop,
            flip_horizontal,
            flip_vertical,
            rotation_deg,
        })
    }

    pub fn apply(&self, img: &ImageTensor, target_size: usize) -> ImageTensor {
        let mut out = match self.crop {
            Some((top, left, side)) => crop(img, top, left, side, side),
            None => img.clone(),
        };
        out = resize_bilinear(&out, target_size, target_size);
        if self.flip_horizontal {
            out = flip_horizontal(&out);
        }
        if self.flip_vertical {
            out = flip_vertical(&out);
        }
        if self.rotation_deg == 180 {
            out = rotate_180(&out);
        }
        out
    }
}

/// Pads both images to squares, then applies one shared random transform.
pub fn augment_pair<R: Rng + ?Sized>(
    a: &ImageTensor,
    b: &ImageTensor,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "paired images differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let a = pad_to_square(a);
    let b = pad_to_square(b);
    let transform = AugmentTransform::sample(config, a.height(), rng)?;
    Ok((
        transform.apply(&a, config.target_size),
        transform.apply(&b, config.target_size),
    ))
}
