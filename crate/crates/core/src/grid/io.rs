//! PNG and JSON sidecar persistence for images, masks and boxes.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, ImageGrid, LabelMask, PixelSpacing};
use crate::error::{Error, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes labels `{0,1,2}` verbatim as an 8-bit grayscale PNG.
pub fn write_mask_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.labels().to_vec())
        .ok_or_else(|| image_err(path, "buffer size"))?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_mask_png(path: &Path, spacing: PixelSpacing) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    let (w, h) = gray.dimensions();
    LabelMask::new(h as usize, w as usize, gray.into_raw(), spacing)
}

/// Writes intensities quantized to 8 bits.
pub fn write_image_png(image: &ImageGrid, path: &Path) -> Result<()> {
    let raw: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = GrayImage::from_raw(image.width() as u32, image.height() as u32, raw)
        .ok_or_else(|| image_err(path, "buffer size"))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads an 8- or 16-bit grayscale PNG, rescaling to `[0, 1]`.
pub fn read_image_png(path: &Path, spacing: PixelSpacing) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h, pixels) = match img {
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            let px = g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            (w, h, px)
        }
        other => {
            let g: ImageBuffer<Luma<u8>, Vec<u8>> = other.to_luma8();
            let (w, h) = g.dimensions();
            let px = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            (w, h, px)
        }
    };
    ImageGrid::new(h as usize, w as usize, pixels, spacing)
}

/// Spacing and reference box attached to one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dx_mm: f64,
    pub dy_mm: f64,
    /// `[x_min, x_max, y_min, y_max]` in pixels.
    pub bbox: [f64; 4],
}

impl Sidecar {
    pub fn new(spacing: PixelSpacing, bbox: &BoundingBox) -> Self {
        Self {
            dx_mm: spacing.dx,
            dy_mm: spacing.dy,
            bbox: bbox.to_array(),
        }
    }

    pub fn spacing(&self) -> Result<PixelSpacing> {
        PixelSpacing::new(self.dx_mm, self.dy_mm)
    }

    pub fn bbox(&self) -> Result<BoundingBox> {
        BoundingBox::from_array(self.bbox)
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
