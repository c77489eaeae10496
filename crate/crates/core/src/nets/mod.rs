//! Network definitions: the U-Net backbone, the U-L2 localizer (segmentation
//! trunk plus a downsampling regression branch) and the LU-Net composite that
//! crops the localizer's box out of the image and segments it with an
//! independent second U-Net.

mod layers;
mod localizer;
mod lunet;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use localizer::{Localizer, LocalizerOutput};
pub use lunet::{remap_to_original, BoxSource, LuNet, LuNetOutput, LuNetPrediction};
pub use unet::{UNet, UNetOutput};

fn default_in_channels() -> usize {
    1
}

fn default_classes() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of pooling steps in the encoder.
    pub levels: usize,
    pub base_filters: usize,
    /// `(H, W)`.
    pub input_size: (usize, usize),
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

impl UNetConfig {
    pub fn new(levels: usize, base_filters: usize, input_size: (usize, usize)) -> Self {
        Self {
            levels,
            base_filters,
            input_size,
            in_channels: 1,
            classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.levels.min(30);
        if self.levels < 2 {
            return Err(Error::InvalidConfig(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_filters < 4 {
            return Err(Error::InvalidConfig(format!(
                "base_filters must be >= 4, got {}",
                self.base_filters
            )));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} not divisible by 2^{}",
                self.levels
            )));
        }
        if self.classes != 3 || self.in_channels == 0 {
            return Err(Error::InvalidConfig(
                "networks segment exactly 3 classes from >= 1 channel".into(),
            ));
        }
        Ok(())
    }
}

/// Which losses train the localizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Localization loss only.
    Mo,
    /// Localization plus an auxiliary segmentation loss on the backbone output.
    Mu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub backbone: UNetConfig,
    /// Dense widths after the downsampling branch; the last must be 4.
    pub head_units: Vec<usize>,
    pub mode: TaskMode,
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_units.last() != Some(&4) || self.head_units.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "head_units must be positive and end in 4, got {:?}",
                self.head_units
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuNetConfig {
    pub localizer: LocalizerConfig,
    pub segmenter: UNetConfig,
    /// Margin fraction added around the tight epicardial box.
    pub margin: f64,
    /// Crop resolution fed to the segmenter; equals `segmenter.input_size`.
    pub crop_size: (usize, usize),
}

impl LuNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.localizer.validate()?;
        self.segmenter.validate()?;
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if self.crop_size != self.segmenter.input_size {
            return Err(Error::InvalidConfig(format!(
                "crop size {:?} differs from segmenter input {:?}",
                self.crop_size, self.segmenter.input_size
            )));
        }
        if self.localizer.backbone.in_channels != self.segmenter.in_channels {
            return Err(Error::InvalidConfig(
                "localizer and segmenter channel counts differ".into(),
            ));
        }
        Ok(())
    }

    /// Desk-scale defaults: 128x128 input and crop, 4 levels, 16 base filters,
    /// head widths 256/64/16/4.
    pub fn desk(margin: f64) -> Self {
        Self::sized(128, 128, 4, 16, vec![256, 64, 16, 4], margin)
    }

    /// Full-scale head widths 1024/256/32/4 on a 256x256 input.
    pub fn full_scale(margin: f64) -> Self {
        Self::sized(256, 256, 5, 32, vec![1024, 256, 32, 4], margin)
    }

    pub fn sized(
        input: usize,
        crop: usize,
        levels: usize,
        base_filters: usize,
        head_units: Vec<usize>,
        margin: f64,
    ) -> Self {
        Self {
            localizer: LocalizerConfig {
                backbone: UNetConfig::new(levels, base_filters, (input, input)),
                head_units,
                mode: TaskMode::Mu,
            },
            segmenter: UNetConfig::new(levels, base_filters, (crop, crop)),
            margin,
            crop_size: (crop, crop),
        }
    }
}

impl Default for LuNetConfig {
    fn default() -> Self {
        Self::desk(0.05)
    }
}
