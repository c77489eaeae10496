use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::evaluate::{reference_box, CaseResult, FramePrediction, PatientPrediction};
use super::train::TrainingHistory;
use crate::clinical::{agreement_stats, AgreementStats, PatientIndices};
use crate::error::{Error, Result};
use crate::grid::io::{read_json, read_mask_png, write_json, write_mask_png};
use crate::grid::{BoundingBox, LabelMask, Structure};
use crate::phantom::{frame_stem, PatientRecord};

/// Mean and population standard deviation of per-case values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            n: values.len(),
            mean,
            sd: var.sqrt(),
        })
    }
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTable {
    /// Frames with a localization result.
    pub n_frames: usize,
    pub iou: Option<MeanSd>,
    pub e_xc: Option<MeanSd>,
    pub e_yc: Option<MeanSd>,
    pub e_h: Option<MeanSd>,
    pub e_w: Option<MeanSd>,
    pub bb_out_count: usize,
    pub bb_out_percent: f64,
    pub clamped_reference_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub structure: Structure,
    pub dice: Option<MeanSd>,
    pub d_m: Option<MeanSd>,
    pub d_h: Option<MeanSd>,
}

/// Patient-level outlier counts; failed cases count in every column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierTable {
    pub n_patients: usize,
    pub geometric_count: usize,
    pub geometric_percent: f64,
    pub anatomical_count: usize,
    pub anatomical_percent: f64,
    pub both_count: usize,
    pub both_percent: f64,
    pub failed_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRow {
    /// `edv`, `esv` or `ef`.
    pub index: String,
    /// Patients with both a predicted and a reference value.
    pub n: usize,
    /// Absent when fewer than three pairs exist or the reference is constant.
    pub stats: Option<AgreementStats>,
}

/// Published full-scale result attached to a report for comparison only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAnnotation {
    pub section: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub unit: String,
    pub note: String,
}

pub const REFERENCE_NOTE: &str = "full-scale CAMUS reference — not asserted";

/// Published LU-Net results on the CAMUS dataset.
pub fn published_references() -> Vec<ReferenceAnnotation> {
    let rows: [(&str, &str, &str, f64, &str); 21] = [
        ("localization", "U-L2-mu-m5", "iou", 0.898, ""),
        ("localization", "U-L2-mu-m5", "bb_out_percent", 36.0, "%"),
        ("localization", "U-L2-mu-m15", "iou", 0.907, ""),
        ("localization", "U-L2-mu-m15", "bb_out_percent", 2.0, "%"),
        ("segmentation", "LU-Net-m5", "endo dice", 0.953, ""),
        ("segmentation", "LU-Net-m5", "endo d_m", 1.7, "mm"),
        ("segmentation", "LU-Net-m5", "endo d_h", 5.5, "mm"),
        ("segmentation", "LU-Net-m5", "epi dice", 0.932, ""),
        ("segmentation", "LU-Net-m5", "epi d_m", 1.5, "mm"),
        ("segmentation", "LU-Net-m5", "epi d_h", 5.1, "mm"),
        ("outliers", "LU-Net-m5", "geometric_percent", 11.0, "%"),
        ("clinical", "LU-Net-m5", "edv corr", 0.956, ""),
        ("clinical", "LU-Net-m5", "edv bias", 1.4, "ml"),
        ("clinical", "LU-Net-m5", "edv mae", 8.3, "ml"),
        ("clinical", "LU-Net-m5", "esv corr", 0.956, ""),
        ("clinical", "LU-Net-m5", "esv bias", 1.6, "ml"),
        ("clinical", "LU-Net-m5", "esv mae", 7.0, "ml"),
        ("clinical", "LU-Net-m5", "ef corr", 0.829, ""),
        ("clinical", "LU-Net-m5", "ef bias", -1.5, "%"),
        ("clinical", "LU-Net-m5", "ef loa", 13.5, "%"),
        ("clinical", "LU-Net-m5", "ef mae", 5.0, "%"),
    ];
    rows.iter()
        .map(|&(section, method, metric, value, unit)| ReferenceAnnotation {
            section: section.into(),
            method: method.into(),
            metric: metric.into(),
            value,
            unit: unit.into(),
            note: REFERENCE_NOTE.into(),
        })
        .collect()
}

/// Localization, segmentation, outlier and clinical tables over a set of
/// cases, with the cases themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n_patients: usize,
    pub localization: LocalizationTable,
    pub segmentation: Vec<SegmentationRow>,
    pub outliers: OutlierTable,
    pub clinical: Vec<ClinicalRow>,
    pub history: Option<TrainingHistory>,
    /// Sorted by patient id.
    pub cases: Vec<CaseResult>,
    pub references: Vec<ReferenceAnnotation>,
}

impl RunReport {
    /// Aggregates per-case values. Cases are sorted by patient id first, so
    /// the result does not depend on their order.
    pub fn from_cases(mut cases: Vec<CaseResult>, history: Option<TrainingHistory>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::EmptyDataset);
        }
        cases.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

        let locs: Vec<_> = cases
            .iter()
            .flat_map(|c| c.frames.iter().filter_map(|f| f.localization))
            .collect();
        let col = |f: &dyn Fn(&super::LocalizationResult) -> f64| MeanSd::of(&locs.iter().map(f).collect::<Vec<_>>());
        let bb_out_count = locs.iter().filter(|l| l.bb_out).count();
        let localization = LocalizationTable {
            n_frames: locs.len(),
            iou: col(&|l| l.iou),
            e_xc: col(&|l| l.errors.e_xc),
            e_yc: col(&|l| l.errors.e_yc),
            e_h: col(&|l| l.errors.e_h),
            e_w: col(&|l| l.errors.e_w),
            bb_out_count,
            bb_out_percent: percent(bb_out_count, locs.len()),
            clamped_reference_count: locs.iter().filter(|l| l.reference_clamped).count(),
        };

        let segmentation = Structure::ALL
            .iter()
            .map(|&s| {
                let scores: Vec<_> = cases
                    .iter()
                    .flat_map(|c| c.frames.iter().flat_map(|f| &f.scores))
                    .filter(|f| f.structure == s)
                    .collect();
                let of = |g: &dyn Fn(&crate::metrics::FrameScores) -> f64| {
                    MeanSd::of(&scores.iter().map(|f| g(f)).collect::<Vec<_>>())
                };
                SegmentationRow {
                    structure: s,
                    dice: of(&|f| f.scores.dice),
                    d_m: of(&|f| f.scores.d_m),
                    d_h: of(&|f| f.scores.d_h),
                }
            })
            .collect();

        let n = cases.len();
        let count = |f: &dyn Fn(&CaseResult) -> bool| cases.iter().filter(|c| f(c)).count();
        let (geo, ana, both) = (
            count(&|c| c.outliers.geometric),
            count(&|c| c.outliers.anatomical),
            count(&|c| c.outliers.both),
        );
        let outliers = OutlierTable {
            n_patients: n,
            geometric_count: geo,
            geometric_percent: percent(geo, n),
            anatomical_count: ana,
            anatomical_percent: percent(ana, n),
            both_count: both,
            both_percent: percent(both, n),
            failed_count: count(&|c| !c.failures.is_empty()),
        };

        let pairs: Vec<(PatientIndices, PatientIndices)> = cases
            .iter()
            .filter_map(|c| Some((c.clinical_predicted?, c.clinical_reference?)))
            .collect();
        let clinical = [
            ("edv", (|p: &PatientIndices| p.edv) as fn(&PatientIndices) -> f64),
            ("esv", |p| p.esv),
            ("ef", |p| p.ef),
        ]
        .iter()
        .map(|(name, get)| {
            let pred: Vec<f64> = pairs.iter().map(|(p, _)| get(p)).collect();
            let reference: Vec<f64> = pairs.iter().map(|(_, r)| get(r)).collect();
            ClinicalRow {
                index: name.to_string(),
                n: pairs.len(),
                stats: agreement_stats(&pred, &reference).ok(),
            }
        })
        .collect();

        Ok(Self {
            n_patients: n,
            localization,
            segmentation,
            outliers,
            clinical,
            history,
            cases,
            references: published_references(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    section: &'a str,
    subset: &'a str,
    metric: &'a str,
    count: Option<usize>,
    percent: Option<f64>,
    n: Option<usize>,
    mean: Option<f64>,
    sd: Option<f64>,
}

impl<'a> SummaryRow<'a> {
    fn stat(section: &'a str, subset: &'a str, metric: &'a str, v: Option<MeanSd>) -> Self {
        Self {
            section,
            subset,
            metric,
            count: None,
            percent: None,
            n: v.map(|v| v.n),
            mean: v.map(|v| v.mean),
            sd: v.map(|v| v.sd),
        }
    }

    fn count(section: &'a str, subset: &'a str, metric: &'a str, count: usize, percent: f64) -> Self {
        Self {
            section,
            subset,
            metric,
            count: Some(count),
            percent: Some(percent),
            n: None,
            mean: None,
            sd: None,
        }
    }

    fn value(section: &'a str, subset: &'a str, metric: &'a str, n: usize, value: Option<f64>) -> Self {
        Self {
            section,
            subset,
            metric,
            count: None,
            percent: None,
            n: Some(n),
            mean: value,
            sd: None,
        }
    }
}

#[derive(Serialize)]
struct FrameRow<'a> {
    patient_id: &'a str,
    fold: Option<usize>,
    frame: String,
    iou: Option<f64>,
    e_xc_mm: Option<f64>,
    e_yc_mm: Option<f64>,
    e_h_mm: Option<f64>,
    e_w_mm: Option<f64>,
    bb_out: Option<bool>,
    endo_dice: Option<f64>,
    endo_dm_mm: Option<f64>,
    endo_dh_mm: Option<f64>,
    endo_simplicity: Option<f64>,
    endo_convexity: Option<f64>,
    epi_dice: Option<f64>,
    epi_dm_mm: Option<f64>,
    epi_dh_mm: Option<f64>,
    epi_simplicity: Option<f64>,
    epi_convexity: Option<f64>,
}

#[derive(Serialize)]
struct PatientRow<'a> {
    patient_id: &'a str,
    fold: Option<usize>,
    geometric_outlier: bool,
    anatomical_outlier: bool,
    edv_ref_ml: Option<f64>,
    edv_pred_ml: Option<f64>,
    esv_ref_ml: Option<f64>,
    esv_pred_ml: Option<f64>,
    ef_ref: Option<f64>,
    ef_pred: Option<f64>,
    failures: String,
}

fn csv_file<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn summary_rows(r: &RunReport) -> Vec<SummaryRow<'_>> {
    let l = &r.localization;
    let mut rows = vec![
        SummaryRow::stat("localization", "all", "iou", l.iou),
        SummaryRow::stat("localization", "all", "e_xc_mm", l.e_xc),
        SummaryRow::stat("localization", "all", "e_yc_mm", l.e_yc),
        SummaryRow::stat("localization", "all", "e_h_mm", l.e_h),
        SummaryRow::stat("localization", "all", "e_w_mm", l.e_w),
        SummaryRow::count("localization", "all", "bb_out", l.bb_out_count, l.bb_out_percent),
    ];
    for s in &r.segmentation {
        let name = s.structure.name();
        rows.push(SummaryRow::stat("segmentation", name, "dice", s.dice));
        rows.push(SummaryRow::stat("segmentation", name, "d_m_mm", s.d_m));
        rows.push(SummaryRow::stat("segmentation", name, "d_h_mm", s.d_h));
    }
    let o = &r.outliers;
    rows.push(SummaryRow::count(
        "outliers",
        "patients",
        "geometric",
        o.geometric_count,
        o.geometric_percent,
    ));
    rows.push(SummaryRow::count(
        "outliers",
        "patients",
        "anatomical",
        o.anatomical_count,
        o.anatomical_percent,
    ));
    rows.push(SummaryRow::count(
        "outliers",
        "patients",
        "both",
        o.both_count,
        o.both_percent,
    ));
    rows.push(SummaryRow::count(
        "outliers",
        "patients",
        "failed",
        o.failed_count,
        percent(o.failed_count, o.n_patients),
    ));
    for c in &r.clinical {
        let s = c.stats;
        rows.push(SummaryRow::value("clinical", &c.index, "corr", c.n, s.map(|s| s.corr)));
        rows.push(SummaryRow::value("clinical", &c.index, "bias", c.n, s.map(|s| s.bias)));
        rows.push(SummaryRow::value("clinical", &c.index, "loa", c.n, s.map(|s| s.loa)));
        rows.push(SummaryRow::value("clinical", &c.index, "mae", c.n, s.map(|s| s.mae)));
    }
    rows
}

fn frame_rows(r: &RunReport) -> Vec<FrameRow<'_>> {
    let mut rows = Vec::new();
    for c in &r.cases {
        for f in &c.frames {
            let l = f.localization;
            let s = |st: Structure| f.scores.iter().find(|s| s.structure == st);
            let (en, ep) = (s(Structure::Endo), s(Structure::Epi));
            rows.push(FrameRow {
                patient_id: &c.patient_id,
                fold: c.fold,
                frame: frame_stem(f.view, f.instant),
                iou: l.map(|l| l.iou),
                e_xc_mm: l.map(|l| l.errors.e_xc),
                e_yc_mm: l.map(|l| l.errors.e_yc),
                e_h_mm: l.map(|l| l.errors.e_h),
                e_w_mm: l.map(|l| l.errors.e_w),
                bb_out: l.map(|l| l.bb_out),
                endo_dice: en.map(|s| s.scores.dice),
                endo_dm_mm: en.map(|s| s.scores.d_m),
                endo_dh_mm: en.map(|s| s.scores.d_h),
                endo_simplicity: en.map(|s| s.simplicity),
                endo_convexity: en.map(|s| s.convexity),
                epi_dice: ep.map(|s| s.scores.dice),
                epi_dm_mm: ep.map(|s| s.scores.d_m),
                epi_dh_mm: ep.map(|s| s.scores.d_h),
                epi_simplicity: ep.map(|s| s.simplicity),
                epi_convexity: ep.map(|s| s.convexity),
            });
        }
    }
    rows
}

fn patient_rows(r: &RunReport) -> Vec<PatientRow<'_>> {
    r.cases
        .iter()
        .map(|c| {
            let (p, q) = (c.clinical_predicted, c.clinical_reference);
            PatientRow {
                patient_id: &c.patient_id,
                fold: c.fold,
                geometric_outlier: c.outliers.geometric,
                anatomical_outlier: c.outliers.anatomical,
                edv_ref_ml: q.map(|v| v.edv),
                edv_pred_ml: p.map(|v| v.edv),
                esv_ref_ml: q.map(|v| v.esv),
                esv_pred_ml: p.map(|v| v.esv),
                ef_ref: q.map(|v| v.ef),
                ef_pred: p.map(|v| v.ef),
                failures: c.failures.join("; "),
            }
        })
        .collect()
}

const REFERENCE_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
const PREDICTION_COLOR: Rgb<u8> = Rgb([255, 40, 40]);
const PREDICTED_BOX_COLOR: Rgb<u8> = Rgb([255, 220, 0]);
const REFERENCE_BOX_COLOR: Rgb<u8> = Rgb([0, 200, 255]);

fn is_boundary(mask: &LabelMask, r: usize, c: usize, s: Structure) -> bool {
    if !mask.in_structure(r, c, s) {
        return false;
    }
    let (h, w) = (mask.height(), mask.width());
    r == 0
        || c == 0
        || r + 1 == h
        || c + 1 == w
        || !mask.in_structure(r - 1, c, s)
        || !mask.in_structure(r + 1, c, s)
        || !mask.in_structure(r, c - 1, s)
        || !mask.in_structure(r, c + 1, s)
}

fn draw_box(img: &mut RgbImage, bb: &BoundingBox, (r0, c0): (u32, u32), (h, w): (usize, usize), color: Rgb<u8>) {
    let to_px = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    let (top, bottom) = (to_px(bb.x_min, h), to_px(bb.x_max - 1e-9, h));
    let (left, right) = (to_px(bb.y_min, w), to_px(bb.y_max - 1e-9, w));
    for c in left..=right {
        img.put_pixel(c0 + c as u32, r0 + top as u32, color);
        img.put_pixel(c0 + c as u32, r0 + bottom as u32, color);
    }
    for r in top..=bottom {
        img.put_pixel(c0 + left as u32, r0 + r as u32, color);
        img.put_pixel(c0 + right as u32, r0 + r as u32, color);
    }
}

/// 2x2 mosaic (rows 2CH/4CH, columns ED/ES) of the images with reference
/// contours in green, predicted contours in red, the predicted box in yellow
/// and the reference box in cyan.
pub fn render_overlay(record: &PatientRecord, prediction: &PatientPrediction, margin: f64) -> RgbImage {
    let (h, w) = (record.frames[0].mask.height(), record.frames[0].mask.width());
    let mut img = RgbImage::new(2 * w as u32, 2 * h as u32);
    for (i, frame) in record.frames.iter().enumerate() {
        let origin = ((i / 2 * h) as u32, (i % 2 * w) as u32);
        let pred: Option<&FramePrediction> = prediction.frames.get(i);
        for r in 0..h {
            for c in 0..w {
                let g = (frame.image.get(r, c) * 255.0).round() as u8;
                let mut px = Rgb([g, g, g]);
                if Structure::ALL.iter().any(|&s| is_boundary(&frame.mask, r, c, s)) {
                    px = REFERENCE_COLOR;
                }
                if let Some(p) = pred {
                    if Structure::ALL.iter().any(|&s| is_boundary(&p.label_map, r, c, s)) {
                        px = PREDICTION_COLOR;
                    }
                }
                img.put_pixel(origin.1 + c as u32, origin.0 + r as u32, px);
            }
        }
        let (rb, _) = reference_box(frame, margin);
        draw_box(&mut img, &rb, origin, (h, w), REFERENCE_BOX_COLOR);
        if let Some(p) = pred {
            draw_box(&mut img, &p.pixel_box, origin, (h, w), PREDICTED_BOX_COLOR);
        }
    }
    img
}

/// Writes `report.json`, `summary.csv`, `frames.csv`, `patients.csv` and
/// `references.csv` into `out`, plus `overlays/<patient_id>.png` for each
/// `(record, prediction)` pair. Returns the number of overlays written.
pub fn report_render(
    report: &RunReport,
    out: &Path,
    overlays: &[(&PatientRecord, &PatientPrediction)],
    margin: f64,
) -> Result<usize> {
    if report.n_patients == 0 || report.cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(report, &out.join("report.json"))?;
    csv_file(&out.join("summary.csv"), summary_rows(report))?;
    csv_file(&out.join("frames.csv"), frame_rows(report))?;
    csv_file(&out.join("patients.csv"), patient_rows(report))?;
    csv_file(&out.join("references.csv"), &report.references)?;
    if !overlays.is_empty() {
        let dir = out.join("overlays");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (record, pred) in overlays {
            let path = dir.join(format!("{}.png", record.patient_id));
            render_overlay(record, pred, margin)
                .save(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
        }
    }
    Ok(overlays.len())
}

/// Stores predicted label maps as `<dir>/<patient_id>/<stem>_pred.png` with
/// the crop boxes in `<dir>/<patient_id>/boxes.json`.
pub fn write_predictions(dir: &Path, records: &[PatientRecord], predictions: &[PatientPrediction]) -> Result<()> {
    for (record, pred) in records.iter().zip(predictions) {
        let pdir = dir.join(&pred.patient_id);
        std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut boxes = BTreeMap::new();
        for (frame, p) in record.frames.iter().zip(&pred.frames) {
            let stem = frame_stem(frame.view, frame.instant);
            write_mask_png(&p.label_map, &pdir.join(format!("{stem}_pred.png")))?;
            boxes.insert(stem, p.pixel_box.to_array());
        }
        write_json(&boxes, &pdir.join("boxes.json"))?;
    }
    Ok(())
}

/// Inverse of [`write_predictions`]; patients without stored boxes get an
/// empty prediction.
pub fn read_predictions(dir: &Path, records: &[PatientRecord]) -> Result<Vec<PatientPrediction>> {
    records
        .iter()
        .map(|record| {
            let pdir = dir.join(&record.patient_id);
            let boxes_path = pdir.join("boxes.json");
            let mut frames = Vec::new();
            if boxes_path.exists() {
                let boxes: BTreeMap<String, [f64; 4]> = read_json(&boxes_path)?;
                for frame in &record.frames {
                    let stem = frame_stem(frame.view, frame.instant);
                    let b = boxes
                        .get(&stem)
                        .ok_or_else(|| Error::InvalidValue(format!("{}: no box for {stem}", record.patient_id)))?;
                    frames.push(FramePrediction {
                        label_map: read_mask_png(&pdir.join(format!("{stem}_pred.png")), frame.mask.spacing())?,
                        pixel_box: BoundingBox::from_array(*b)?,
                    });
                }
            }
            Ok(PatientPrediction {
                patient_id: record.patient_id.clone(),
                frames,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{evaluate, EvalOptions, ReferencePredictor};
    use crate::metrics::calibrate_bounds;
    use crate::phantom::{generate_dataset, PhantomParams};
    use proptest::prelude::*;

    fn evaluation(n: usize) -> (Vec<PatientRecord>, crate::harness::Evaluation) {
        let recs = generate_dataset(&PhantomParams::desk(), n, 5).unwrap();
        let refs: Vec<LabelMask> = recs
            .iter()
            .flat_map(|r| r.frames.iter().map(|f| f.mask.clone()))
            .collect();
        let opts = EvalOptions {
            bounds: calibrate_bounds(&refs, 2, 0).unwrap(),
            margin: 0.15,
            n_discs: 20,
        };
        let ev = evaluate(&ReferencePredictor { margin: 0.05 }, &recs, &opts).unwrap();
        (recs, ev)
    }

    #[test]
    fn mean_sd_matches_direct_formula() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(m.n, 4);
        assert_eq!(m.mean, 3.0);
        assert!((m.sd - (14.0f64 / 4.0).sqrt()).abs() < 1e-15);
        assert!(MeanSd::of(&[]).is_none());
    }

    #[test]
    fn references_carry_the_note() {
        let refs = published_references();
        assert!(refs.iter().all(|r| r.note == REFERENCE_NOTE));
        let find = |m: &str, k: &str| refs.iter().find(|r| r.method == m && r.metric == k).unwrap().value;
        assert_eq!(find("LU-Net-m5", "epi d_m"), 1.5);
        assert_eq!(find("LU-Net-m5", "epi d_h"), 5.1);
        assert_eq!(find("LU-Net-m5", "endo d_m"), 1.7);
        assert_eq!(find("LU-Net-m5", "endo d_h"), 5.5);
        assert_eq!(find("LU-Net-m5", "geometric_percent"), 11.0);
        assert_eq!(find("LU-Net-m5", "ef corr"), 0.829);
        assert_eq!(find("LU-Net-m5", "ef mae"), 5.0);
        assert_eq!(find("U-L2-mu-m5", "iou"), 0.898);
    }

    #[test]
    fn json_round_trips() {
        let (_, ev) = evaluation(4);
        let text = ev.report.to_json().unwrap();
        assert_eq!(RunReport::from_json(&text).unwrap(), ev.report);
    }

    #[test]
    fn margin_mismatch_shows_in_localization() {
        // Predicted boxes at 5% against references at 15%: smaller boxes, lower IOU.
        let (_, ev) = evaluation(3);
        let l = &ev.report.localization;
        assert_eq!(l.n_frames, 12);
        assert!(l.iou.unwrap().mean < 1.0);
        assert_eq!(l.bb_out_count, 0);
    }

    #[test]
    fn render_writes_every_artifact() {
        let (recs, ev) = evaluation(3);
        let dir = tempfile::tempdir().unwrap();
        let pairs: Vec<_> = recs.iter().zip(&ev.predictions).collect();
        let n = report_render(&ev.report, dir.path(), &pairs, 0.15).unwrap();
        assert_eq!(n, recs.len());
        let overlays = std::fs::read_dir(dir.path().join("overlays")).unwrap().count();
        assert_eq!(overlays, recs.len());
        for f in [
            "report.json",
            "summary.csv",
            "frames.csv",
            "patients.csv",
            "references.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let frames = std::fs::read_to_string(dir.path().join("frames.csv")).unwrap();
        assert_eq!(frames.lines().count(), 1 + 4 * recs.len());
        let refs = std::fs::read_to_string(dir.path().join("references.csv")).unwrap();
        assert!(refs.contains(REFERENCE_NOTE));
        let back: RunReport = read_json(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, ev.report);
    }

    #[test]
    fn empty_report_renders_nothing() {
        let (_, ev) = evaluation(1);
        let mut empty = ev.report.clone();
        empty.cases.clear();
        empty.n_patients = 0;
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        assert!(matches!(
            report_render(&empty, &out, &[], 0.15),
            Err(Error::EmptyDataset)
        ));
        assert!(!out.exists());
    }

    #[test]
    fn predictions_round_trip_through_disk() {
        let (recs, ev) = evaluation(2);
        let dir = tempfile::tempdir().unwrap();
        write_predictions(dir.path(), &recs, &ev.predictions).unwrap();
        assert_eq!(read_predictions(dir.path(), &recs).unwrap(), ev.predictions);
    }

    #[test]
    fn overlay_has_mosaic_size() {
        let (recs, ev) = evaluation(1);
        let img = render_overlay(&recs[0], &ev.predictions[0], 0.15);
        assert_eq!(img.dimensions(), (256, 256));
        assert!(img.pixels().any(|p| *p == PREDICTION_COLOR));
        assert!(img.pixels().any(|p| *p == PREDICTED_BOX_COLOR));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn percentages_equal_counts_over_totals(flags in proptest::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..40)) {
            let cases: Vec<CaseResult> = flags
                .iter()
                .enumerate()
                .map(|(i, &(g, a, failed))| CaseResult {
                    patient_id: format!("p{i:03}"),
                    fold: None,
                    frames: Vec::new(),
                    outliers: crate::metrics::OutlierFlags::new(g, a),
                    clinical_reference: None,
                    clinical_predicted: None,
                    failures: if failed { vec!["x".into()] } else { Vec::new() },
                })
                .collect();
            let r = RunReport::from_cases(cases, None).unwrap();
            let n = flags.len();
            let o = r.outliers;
            let geo = flags.iter().filter(|f| f.0).count();
            let ana = flags.iter().filter(|f| f.1).count();
            let both = flags.iter().filter(|f| f.0 && f.1).count();
            prop_assert_eq!(o.geometric_count, geo);
            prop_assert_eq!(o.anatomical_count, ana);
            prop_assert_eq!(o.both_count, both);
            prop_assert_eq!(o.geometric_percent, 100.0 * geo as f64 / n as f64);
            prop_assert_eq!(o.anatomical_percent, 100.0 * ana as f64 / n as f64);
            prop_assert_eq!(o.both_percent, 100.0 * both as f64 / n as f64);
        }

        #[test]
        fn aggregation_ignores_case_order(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cases: Vec<CaseResult> = (0..12)
                .map(|i| CaseResult {
                    patient_id: format!("p{i:03}"),
                    fold: Some(i % 3),
                    frames: Vec::new(),
                    outliers: crate::metrics::OutlierFlags::new(i % 2 == 0, i % 5 == 0),
                    clinical_reference: Some(PatientIndices::from_volumes(100.0 + i as f64, 40.0 + (i * i) as f64 / 7.0).unwrap()),
                    clinical_predicted: Some(PatientIndices::from_volumes(97.0 + 1.1 * i as f64, 45.0 - i as f64 / 3.0).unwrap()),
                    failures: Vec::new(),
                })
                .collect();
            let mut shuffled = cases.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(RunReport::from_cases(cases, None).unwrap(), RunReport::from_cases(shuffled, None).unwrap());
        }
    }
}
