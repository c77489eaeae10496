//! Segmentation accuracy and outlier classification.

mod distance;
mod shape;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mask_to_contour, Instant, LabelMask, Structure, View};

pub use distance::{hausdorff, mean_absolute_distance};
pub use shape::{convex_hull, convexity, perimeter, polygon_area, simplicity};

/// `2|A & B| / (|A| + |B|)` for one structure; 1 when both are empty.
pub fn dice(a: &LabelMask, b: &LabelMask, structure: Structure) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::GridMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (structure.contains(la), structure.contains(lb));
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Accuracy of one structure in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dice: f64,
    pub d_m: f64,
    pub d_h: f64,
}

pub fn segmentation_scores(pred: &LabelMask, reference: &LabelMask, structure: Structure) -> Result<SegScores> {
    let d = dice(pred, reference, structure)?;
    let a = mask_to_contour(pred, structure)?;
    let b = mask_to_contour(reference, structure)?;
    Ok(SegScores {
        dice: d,
        d_m: mean_absolute_distance(&a, &b)?,
        d_h: hausdorff(&a, &b)?,
    })
}

/// Scores and shape descriptors of one predicted structure in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub view: View,
    pub instant: Instant,
    pub structure: Structure,
    pub scores: SegScores,
    pub simplicity: f64,
    pub convexity: f64,
}

pub fn frame_scores(
    pred: &LabelMask,
    reference: &LabelMask,
    view: View,
    instant: Instant,
    structure: Structure,
) -> Result<FrameScores> {
    Ok(FrameScores {
        view,
        instant,
        structure,
        scores: segmentation_scores(pred, reference, structure)?,
        simplicity: simplicity(pred, structure)?,
        convexity: convexity(pred, structure)?,
    })
}

/// Limits for one structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureBounds {
    /// Largest acceptable mean distance, mm.
    pub dm_max: f64,
    /// Largest acceptable Hausdorff distance, mm.
    pub dh_max: f64,
    pub min_simplicity: f64,
    pub min_convexity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierBounds {
    pub endo: StructureBounds,
    pub epi: StructureBounds,
}

impl OutlierBounds {
    pub fn get(&self, structure: Structure) -> &StructureBounds {
        match structure {
            Structure::Endo => &self.endo,
            Structure::Epi => &self.epi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in [&self.endo, &self.epi] {
            let ok = b.dm_max > 0.0
                && b.dh_max > 0.0
                && b.min_simplicity > 0.0
                && b.min_simplicity < 1.0
                && b.min_convexity > 0.0
                && b.min_convexity < 1.0;
            if !ok {
                return Err(Error::InvalidConfig(format!("invalid outlier bounds {b:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutlierFlags {
    pub geometric: bool,
    pub anatomical: bool,
    pub both: bool,
}

impl OutlierFlags {
    pub fn new(geometric: bool, anatomical: bool) -> Self {
        Self {
            geometric,
            anatomical,
            both: geometric && anatomical,
        }
    }
}

pub fn is_geometric_outlier(f: &FrameScores, bounds: &OutlierBounds) -> bool {
    let b = bounds.get(f.structure);
    f.scores.d_m > b.dm_max || f.scores.d_h > b.dh_max
}

pub fn is_anatomical_outlier(f: &FrameScores, bounds: &OutlierBounds) -> bool {
    let b = bounds.get(f.structure);
    f.simplicity < b.min_simplicity || f.convexity < b.min_convexity
}

/// Patient-level flags over the eight frame scores (two views, two instants,
/// two structures). Every combination must be present exactly once.
pub fn classify_outliers(frames: &[FrameScores], bounds: &OutlierBounds) -> Result<OutlierFlags> {
    let mut seen = BTreeMap::new();
    for f in frames {
        *seen.entry((f.view, f.instant, f.structure)).or_insert(0usize) += 1;
    }
    let complete = seen.len() == 8 && seen.values().all(|&n| n == 1);
    if !complete {
        return Err(Error::IncompleteScores(format!(
            "expected 8 distinct (view, instant, structure) scores, got {} entries over {} keys",
            frames.len(),
            seen.len()
        )));
    }
    Ok(OutlierFlags::new(
        frames.iter().any(|f| is_geometric_outlier(f, bounds)),
        frames.iter().any(|f| is_anatomical_outlier(f, bounds)),
    ))
}

/// Shifts a mask by `(dr, dc)` pixels, filling with background.
fn shifted(mask: &LabelMask, dr: isize, dc: isize) -> LabelMask {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let mut out = LabelMask::zeros(mask.height(), mask.width(), mask.spacing());
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r - dr, c - dc);
            if sr >= 0 && sc >= 0 && sr < h && sc < w {
                out.set(r as usize, c as usize, mask.get(sr as usize, sc as usize));
            }
        }
    }
    out
}

/// Default bounds from the reference annotations: distance limits are the
/// largest distances between each reference and a copy shifted by up to
/// `jitter_px` pixels in a seeded random direction; shape thresholds are the
/// lowest descriptor values over the references.
pub fn calibrate_bounds(references: &[LabelMask], jitter_px: usize, seed: u64) -> Result<OutlierBounds> {
    if references.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = jitter_px as i64;
    let per = |structure: Structure, rng: &mut ChaCha8Rng| -> Result<StructureBounds> {
        let mut b = StructureBounds {
            dm_max: 0.0,
            dh_max: 0.0,
            min_simplicity: 1.0,
            min_convexity: 1.0,
        };
        for m in references {
            let (dr, dc) = loop {
                let d = (rng.random_range(-j..=j), rng.random_range(-j..=j));
                if d != (0, 0) || j == 0 {
                    break (d.0 as isize, d.1 as isize);
                }
            };
            let s = segmentation_scores(&shifted(m, dr, dc), m, structure)?;
            b.dm_max = b.dm_max.max(s.d_m);
            b.dh_max = b.dh_max.max(s.d_h);
            b.min_simplicity = b.min_simplicity.min(simplicity(m, structure)?);
            b.min_convexity = b.min_convexity.min(convexity(m, structure)?);
        }
        // Keep thresholds strictly inside (0, 1) and limits positive.
        b.min_simplicity = b.min_simplicity.min(1.0 - 1e-9);
        b.min_convexity = b.min_convexity.min(1.0 - 1e-9);
        let floor = references[0].spacing().dx.min(references[0].spacing().dy);
        b.dm_max = b.dm_max.max(floor);
        b.dh_max = b.dh_max.max(floor);
        Ok(b)
    };
    let endo = per(Structure::Endo, &mut rng)?;
    let epi = per(Structure::Epi, &mut rng)?;
    Ok(OutlierBounds { endo, epi })
}

/// One per-frame, per-structure CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub patient_id: String,
    pub view: View,
    pub instant: Instant,
    pub structure: Structure,
    pub dice: f64,
    pub dm_mm: f64,
    pub dh_mm: f64,
    pub simplicity: f64,
    pub convexity: f64,
    pub geo_outlier: bool,
    pub ana_outlier: bool,
}

impl ScoreRow {
    pub fn new(patient_id: &str, f: &FrameScores, bounds: &OutlierBounds) -> Self {
        Self {
            patient_id: patient_id.to_string(),
            view: f.view,
            instant: f.instant,
            structure: f.structure,
            dice: f.scores.dice,
            dm_mm: f.scores.d_m,
            dh_mm: f.scores.d_h,
            simplicity: f.simplicity,
            convexity: f.convexity,
            geo_outlier: is_geometric_outlier(f, bounds),
            ana_outlier: is_anatomical_outlier(f, bounds),
        }
    }
}
