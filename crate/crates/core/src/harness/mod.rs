//! Training, cross-validation, evaluation and report generation.

mod cv;
mod evaluate;
pub mod gradsuite;
mod report;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::OutlierBounds;
use crate::nets::LuNetConfig;

pub use cv::{
    cross_validate, resolve_bounds, split_folds, CrossValidation, CrossValidationReport, FoldReport, FoldSplit,
};
pub use evaluate::{
    evaluate, reference_box, CasePredictor, CaseResult, EvalOptions, Evaluation, FramePrediction, FrameResult,
    LocalizationResult, LuNetPredictor, PatientPrediction, ReferencePredictor,
};
pub use gradsuite::{gradient_checks, GradCheck, GradCheckResult};
pub use report::{
    published_references, read_predictions, render_overlay, report_render, write_predictions, ClinicalRow,
    LocalizationTable, MeanSd, OutlierTable, ReferenceAnnotation, RunReport, SegmentationRow, REFERENCE_NOTE,
};
pub use train::{
    samples_from_records, train, train_with, validation_loss, Adam, EpochRecord, LossBreakdown, Sample, StopReason,
    TrainingHistory,
};

/// Which validation loss selects the best epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Weighted localization plus segmentation loss.
    #[default]
    Multitask,
    /// Segmentation terms only.
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Share of training records held out for validation when no fold is
    /// available for it.
    pub validation_fraction: f64,
    pub monitor: Monitor,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            max_epochs: 200,
            patience: 20,
            weights: LossWeights::default(),
            seed: 0,
            validation_fraction: 0.1,
            monitor: Monitor::Multitask,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid Adam settings {a:?}")));
        }
        self.weights.validate()
    }
}

/// Outlier-bound calibration used when a run has no explicit bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    pub jitter_px: usize,
    pub seed: u64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { jitter_px: 2, seed: 0 }
    }
}

/// Everything a training or cross-validation run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: LuNetConfig,
    pub train: TrainConfig,
    pub bounds: Option<OutlierBounds>,
    pub calibration: Calibration,
    pub n_discs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: LuNetConfig::default(),
            train: TrainConfig::default(),
            bounds: None,
            calibration: Calibration::default(),
            n_discs: crate::clinical::DEFAULT_DISCS,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(b) = &self.bounds {
            b.validate()?;
        }
        if self.n_discs < 4 {
            return Err(Error::InvalidConfig(format!(
                "n_discs must be at least 4, got {}",
                self.n_discs
            )));
        }
        Ok(())
    }
}
