use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Three-channel raster with values in [-1, 1], stored channel-planar
/// (all red values, then green, then blue; each plane row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

/// Maps an 8-bit intensity onto [-1, 1].
pub fn byte_to_unit(v: u8) -> f32 {
    (2.0 * f64::from(v) / 255.0 - 1.0) as f32
}

/// Inverse of [`byte_to_unit`]: rounds half away from zero and saturates.
pub fn unit_to_byte(x: f32) -> u8 {
    let scaled = (f64::from(x) + 1.0) * 255.0 / 2.0;
    scaled.round().clamp(0.0, 255.0) as u8
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "image value {bad} outside [-1, 1]"
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    /// Builds a tensor from values that may leave [-1, 1]; they are clamped.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        assert!((-1.0..=1.0).contains(&value), "value outside [-1, 1]");
        ImageTensor {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, CHANNELS)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f32) {
        let idx = (channel * self.height + y) * self.width + x;
        self.data[idx] = value.clamp(-1.0, 1.0);
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; CHANNELS * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = byte_to_unit(px.0[c]);
            }
        }
        ImageTensor {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                unit_to_byte(self.get(0, y, x)),
                unit_to_byte(self.get(1, y, x)),
                unit_to_byte(self.get(2, y, x)),
            ])
        })
    }

    /// Decodes an 8-bit RGB raster without any geometric change.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?;
        let decoded = reader.decode().map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        match decoded {
            image::DynamicImage::ImageRgb8(rgb) => Ok(Self::from_rgb8(&rgb)),
            other => Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected 8-bit RGB, found {:?}", other.color()),
            }),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Writes a binary mask as an 8-bit grayscale PNG (255 = foreground).
pub fn save_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    assert_eq!(mask.len(), width * height);
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
        });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads a mask written by [`save_mask_png`]; any nonzero pixel is foreground.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.pixels().map(|p| p.0[0] > 0).collect()))
}
