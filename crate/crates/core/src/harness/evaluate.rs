use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::RunReport;
use crate::clinical::PatientIndices;
use crate::diffcore::NormalizedBox;
use crate::error::{Error, Result};
use crate::grid::{
    bbox_errors, encompasses, expand_bbox_checked, iou, BoundingBox, BoxErrors, ImageGrid, Instant, LabelMask,
    Structure, View,
};
use crate::metrics::{classify_outliers, frame_scores, FrameScores, OutlierBounds, OutlierFlags};
use crate::nets::{BoxSource, LuNet};
use crate::phantom::{frame_stem, Frame, PatientRecord};

/// Tight epicardial box of `frame` grown by `margin`, and whether the image
/// border clipped it.
pub fn reference_box(frame: &Frame, margin: f64) -> (BoundingBox, bool) {
    expand_bbox_checked(&frame.bbox, margin, &frame.mask.extent())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub label_map: LabelMask,
    /// Crop box in pixels.
    pub pixel_box: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientPrediction {
    pub patient_id: String,
    /// Same order as the record's frames.
    pub frames: Vec<FramePrediction>,
}

/// Anything that maps a patient's frames to label maps and crop boxes.
/// Implementations may read the references (oracles) or ignore them.
pub trait CasePredictor: Sync {
    fn predict(&self, frames: &[&Frame]) -> Result<Vec<FramePrediction>>;
}

/// LU-Net inference, optionally with the reference box forced in place of
/// the predicted one.
#[derive(Debug, Clone, Copy)]
pub struct LuNetPredictor<'a> {
    pub net: &'a LuNet,
    pub teacher_forced: bool,
}

impl<'a> LuNetPredictor<'a> {
    pub fn new(net: &'a LuNet) -> Self {
        Self {
            net,
            teacher_forced: false,
        }
    }

    pub fn teacher_forced(net: &'a LuNet) -> Self {
        Self {
            net,
            teacher_forced: true,
        }
    }
}

impl CasePredictor for LuNetPredictor<'_> {
    fn predict(&self, frames: &[&Frame]) -> Result<Vec<FramePrediction>> {
        let images: Vec<&ImageGrid> = frames.iter().map(|f| &f.image).collect();
        let source = if self.teacher_forced {
            let margin = self.net.config().margin;
            BoxSource::Given(
                frames
                    .iter()
                    .map(|f| {
                        let (bb, _) = reference_box(f, margin);
                        NormalizedBox::from_array(bb.normalized(f.mask.height(), f.mask.width()))
                    })
                    .collect(),
            )
        } else {
            BoxSource::Predicted
        };
        Ok(self
            .net
            .predict_with(&images, &source)?
            .into_iter()
            .map(|p| FramePrediction {
                label_map: p.label_map,
                pixel_box: p.pixel_box,
            })
            .collect())
    }
}

/// Returns the reference masks and margin boxes unchanged.
#[derive(Debug, Clone, Copy)]
pub struct ReferencePredictor {
    pub margin: f64,
}

impl CasePredictor for ReferencePredictor {
    fn predict(&self, frames: &[&Frame]) -> Result<Vec<FramePrediction>> {
        Ok(frames
            .iter()
            .map(|f| FramePrediction {
                label_map: f.mask.clone(),
                pixel_box: reference_box(f, self.margin).0,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bounds: OutlierBounds,
    /// Margin of the reference boxes predictions are compared with.
    pub margin: f64,
    pub n_discs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub iou: f64,
    pub errors: BoxErrors,
    /// The predicted box misses part of the reference epicardium.
    pub bb_out: bool,
    /// The image border clipped the reference box.
    pub reference_clamped: bool,
    pub predicted_box: [f64; 4],
    pub reference_box: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub view: View,
    pub instant: Instant,
    pub localization: Option<LocalizationResult>,
    /// One entry per structure that could be scored.
    pub scores: Vec<FrameScores>,
}

/// Everything measured on one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub patient_id: String,
    pub fold: Option<usize>,
    pub frames: Vec<FrameResult>,
    /// Failed cases count as both geometric and anatomical outliers.
    pub outliers: OutlierFlags,
    pub clinical_reference: Option<PatientIndices>,
    pub clinical_predicted: Option<PatientIndices>,
    pub failures: Vec<String>,
}

/// Report plus the raw predictions behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: RunReport,
    pub predictions: Vec<PatientPrediction>,
}

fn endo_masks<'a>(get: impl Fn(View, Instant) -> &'a LabelMask, n_discs: usize) -> Result<PatientIndices> {
    PatientIndices::from_masks(
        get(View::TwoChamber, Instant::ED),
        get(View::FourChamber, Instant::ED),
        get(View::TwoChamber, Instant::ES),
        get(View::FourChamber, Instant::ES),
        n_discs,
    )
}

fn score_case(record: &PatientRecord, preds: &[FramePrediction], opts: &EvalOptions) -> CaseResult {
    let mut failures = Vec::new();
    let mut frames = Vec::with_capacity(record.frames.len());
    let mut all_scores = Vec::new();
    for (frame, pred) in record.frames.iter().zip(preds) {
        let stem = frame_stem(frame.view, frame.instant);
        let (ref_box, clamped) = reference_box(frame, opts.margin);
        let localization = match encompasses(&pred.pixel_box, &frame.mask, Structure::Epi) {
            Ok(inside) => Some(LocalizationResult {
                iou: iou(&pred.pixel_box, &ref_box),
                errors: bbox_errors(&pred.pixel_box, &ref_box, frame.mask.spacing()),
                bb_out: !inside,
                reference_clamped: clamped,
                predicted_box: pred.pixel_box.to_array(),
                reference_box: ref_box.to_array(),
            }),
            Err(e) => {
                failures.push(format!("{stem} localization: {e}"));
                None
            }
        };
        let mut scores = Vec::new();
        for s in Structure::ALL {
            match frame_scores(&pred.label_map, &frame.mask, frame.view, frame.instant, s) {
                Ok(f) => scores.push(f),
                Err(e) => failures.push(format!("{stem} {}: {e}", s.name())),
            }
        }
        all_scores.extend_from_slice(&scores);
        frames.push(FrameResult {
            view: frame.view,
            instant: frame.instant,
            localization,
            scores,
        });
    }
    let outliers = match classify_outliers(&all_scores, &opts.bounds) {
        Ok(flags) => flags,
        Err(e) => {
            if failures.is_empty() {
                failures.push(format!("outliers: {e}"));
            }
            OutlierFlags::new(true, true)
        }
    };
    let clinical_reference = match endo_masks(|v, i| &record.frame(v, i).mask, opts.n_discs) {
        Ok(c) => Some(c),
        Err(e) => {
            failures.push(format!("reference indices: {e}"));
            None
        }
    };
    let clinical_predicted = match endo_masks(|v, i| &preds[crate::phantom::frame_index(v, i)].label_map, opts.n_discs)
    {
        Ok(c) => Some(c),
        Err(e) => {
            failures.push(format!("predicted indices: {e}"));
            None
        }
    };
    CaseResult {
        patient_id: record.patient_id.clone(),
        fold: None,
        frames,
        outliers,
        clinical_reference,
        clinical_predicted,
        failures,
    }
}

fn failed_case(record: &PatientRecord, error: &Error) -> CaseResult {
    CaseResult {
        patient_id: record.patient_id.clone(),
        fold: None,
        frames: Vec::new(),
        outliers: OutlierFlags::new(true, true),
        clinical_reference: None,
        clinical_predicted: None,
        failures: vec![format!("prediction: {error}")],
    }
}

/// Runs `predictor` on every record and scores localization, segmentation,
/// outliers and clinical indices. A record whose prediction or scoring fails
/// is kept as an outlier carrying failure tags.
pub fn evaluate(predictor: &dyn CasePredictor, records: &[PatientRecord], opts: &EvalOptions) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    opts.bounds.validate()?;
    let results: Vec<(CaseResult, PatientPrediction)> = records
        .par_iter()
        .map(|record| {
            let frames: Vec<&Frame> = record.frames.iter().collect();
            let preds = predictor.predict(&frames).and_then(|p| {
                if p.len() == frames.len() {
                    Ok(p)
                } else {
                    Err(Error::ShapeMismatch(format!(
                        "{} predictions for {} frames",
                        p.len(),
                        frames.len()
                    )))
                }
            });
            match preds {
                Ok(preds) => {
                    let case = score_case(record, &preds, opts);
                    (
                        case,
                        PatientPrediction {
                            patient_id: record.patient_id.clone(),
                            frames: preds,
                        },
                    )
                }
                Err(e) => (
                    failed_case(record, &e),
                    PatientPrediction {
                        patient_id: record.patient_id.clone(),
                        frames: Vec::new(),
                    },
                ),
            }
        })
        .collect();
    let (cases, predictions): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Evaluation {
        report: RunReport::from_cases(cases, None)?,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::dynamic_roi_reference;
    use crate::metrics::{calibrate_bounds, dice};
    use crate::nets::remap_to_original;
    use crate::phantom::{generate_dataset, PhantomParams};

    fn records(n: usize) -> Vec<PatientRecord> {
        generate_dataset(&PhantomParams::desk(), n, 21).unwrap()
    }

    fn bounds(records: &[PatientRecord]) -> OutlierBounds {
        let refs: Vec<LabelMask> = records
            .iter()
            .flat_map(|r| r.frames.iter().map(|f| f.mask.clone()))
            .collect();
        calibrate_bounds(&refs, 2, 0).unwrap()
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let recs = records(5);
        let opts = EvalOptions {
            bounds: bounds(&recs),
            margin: 0.15,
            n_discs: 20,
        };
        let ev = evaluate(&ReferencePredictor { margin: 0.15 }, &recs, &opts).unwrap();
        let r = &ev.report;
        for row in &r.segmentation {
            let (d, dm, dh) = (row.dice.unwrap(), row.d_m.unwrap(), row.d_h.unwrap());
            assert_eq!((d.mean, d.sd), (1.0, 0.0));
            assert_eq!((dm.mean, dh.mean), (0.0, 0.0));
        }
        assert_eq!(r.outliers.geometric_count, 0);
        assert_eq!(r.outliers.anatomical_count, 0);
        assert_eq!(r.outliers.both_count, 0);
        assert_eq!(r.outliers.failed_count, 0);
        for row in &r.clinical {
            let s = row.stats.unwrap();
            assert!((s.corr - 1.0).abs() < 1e-12, "{row:?}");
            assert_eq!(s.mae, 0.0);
        }
        let loc = &r.localization;
        assert_eq!(loc.iou.unwrap().mean, 1.0);
        assert_eq!(loc.bb_out_count, 0);
    }

    struct IdentitySegmenter {
        margin: f64,
        crop: (usize, usize),
    }

    impl CasePredictor for IdentitySegmenter {
        fn predict(&self, frames: &[&Frame]) -> Result<Vec<FramePrediction>> {
            frames
                .iter()
                .map(|f| {
                    let (h, w) = (f.mask.height(), f.mask.width());
                    let (bb, _) = reference_box(f, self.margin);
                    let nb = NormalizedBox::from_array(bb.normalized(h, w));
                    let roi = dynamic_roi_reference(&f.mask, &nb, self.crop);
                    let label_map = remap_to_original(&roi, &bb, (h, w), f.mask.spacing())?;
                    Ok(FramePrediction {
                        label_map,
                        pixel_box: bb,
                    })
                })
                .collect()
        }
    }

    #[test]
    fn crop_and_remap_round_trip_keeps_dice() {
        let recs = records(6);
        for crop in [(64, 64), (128, 128)] {
            for margin in [0.05, 0.15] {
                let p = IdentitySegmenter { margin, crop };
                for r in &recs {
                    let frames: Vec<&Frame> = r.frames.iter().collect();
                    for (f, pred) in frames.iter().zip(p.predict(&frames).unwrap()) {
                        for s in Structure::ALL {
                            let d = dice(&pred.label_map, &f.mask, s).unwrap();
                            assert!(d >= 0.98, "{crop:?} m={margin} {} {s:?}: {d}", r.patient_id);
                        }
                    }
                }
            }
        }
    }

    struct Empty;

    impl CasePredictor for Empty {
        fn predict(&self, frames: &[&Frame]) -> Result<Vec<FramePrediction>> {
            Ok(frames
                .iter()
                .map(|f| FramePrediction {
                    label_map: LabelMask::zeros(f.mask.height(), f.mask.width(), f.mask.spacing()),
                    pixel_box: BoundingBox::new(0.0, 1.0, 0.0, 1.0).unwrap(),
                })
                .collect())
        }
    }

    struct Failing;

    impl CasePredictor for Failing {
        fn predict(&self, _: &[&Frame]) -> Result<Vec<FramePrediction>> {
            Err(Error::InvalidValue("no prediction".into()))
        }
    }

    #[test]
    fn failures_become_tagged_outliers() {
        let recs = records(3);
        let opts = EvalOptions {
            bounds: bounds(&recs),
            margin: 0.15,
            n_discs: 20,
        };
        for p in [&Empty as &dyn CasePredictor, &Failing] {
            let ev = evaluate(p, &recs, &opts).unwrap();
            let r = &ev.report;
            assert_eq!(r.outliers.n_patients, 3);
            assert_eq!(r.outliers.failed_count, 3);
            assert_eq!(r.outliers.geometric_count, 3);
            assert_eq!(r.outliers.both_count, 3);
            assert!(r.cases.iter().all(|c| !c.failures.is_empty()));
        }
    }

    #[test]
    fn empty_record_set_is_an_error() {
        let recs = records(1);
        let opts = EvalOptions {
            bounds: bounds(&recs),
            margin: 0.15,
            n_discs: 20,
        };
        assert!(matches!(
            evaluate(&ReferencePredictor { margin: 0.15 }, &[], &opts),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn teacher_forced_lunet_crops_the_reference_box() {
        use crate::nets::LuNetConfig;
        let recs = generate_dataset(
            &PhantomParams {
                image_size: 64,
                spacing_mm: 2.5,
                ..PhantomParams::desk()
            },
            1,
            3,
        )
        .unwrap();
        let net = LuNet::new(LuNetConfig::sized(64, 32, 2, 4, vec![8, 4], 0.15), 1).unwrap();
        let frames: Vec<&Frame> = recs[0].frames.iter().collect();
        let preds = LuNetPredictor::teacher_forced(&net).predict(&frames).unwrap();
        for (f, p) in frames.iter().zip(&preds) {
            let (bb, _) = reference_box(f, 0.15);
            for (a, b) in p.pixel_box.to_array().iter().zip(bb.to_array()) {
                assert!((a - b).abs() < 1e-9, "{:?} vs {bb:?}", p.pixel_box);
            }
        }
    }
}
