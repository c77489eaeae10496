//! Training objectives: clipped L1 box regression, multi-class soft Dice,
//! the dynamic ROI reference and the weighted multi-task sum.

use serde::{Deserialize, Serialize};

use crate::diffcore::{NormalizedBox, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{LabelMask, PixelSpacing};
use crate::nets::{LuNetOutput, TaskMode};

/// How the clip threshold applies to the four coordinate errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// `sum_k min(|e_k|, clip)`.
    #[default]
    PerCoordinate,
    /// `min(sum_k |e_k|, clip)`.
    Summed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub localization_weight: f64,
    pub segmentation_weight: f64,
    pub clip: f64,
    /// Dice smoothing term, in pixel-count units.
    pub smooth: f64,
    pub clip_mode: ClipMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            localization_weight: 10.0,
            segmentation_weight: 1.0,
            clip: 0.99,
            smooth: 1.0,
            clip_mode: ClipMode::PerCoordinate,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.localization_weight, self.segmentation_weight, self.smooth]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive {
            return Err(Error::InvalidConfig(
                "loss weights and smoothing must be positive".into(),
            ));
        }
        if !(self.clip > 0.0 && self.clip <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clip must lie in (0, 1], got {}",
                self.clip
            )));
        }
        Ok(())
    }
}

/// Clipped L1 error of one box against its reference.
pub fn clipped_l1(pred: &NormalizedBox, reference: &NormalizedBox, clip: f64, mode: ClipMode) -> f64 {
    let errs = pred
        .to_array()
        .into_iter()
        .zip(reference.to_array())
        .map(|(p, r)| (p - r).abs());
    match mode {
        ClipMode::PerCoordinate => errs.map(|e| e.min(clip)).sum(),
        ClipMode::Summed => errs.sum::<f64>().min(clip),
    }
}

/// Batch mean of [`clipped_l1`] for predictions `pred: [N, 4]`.
pub fn clipped_l1_loss(tape: &mut Tape, pred: Var, refs: &[NormalizedBox], clip: f64, mode: ClipMode) -> Result<Var> {
    let (n, four) = tape.value(pred).dims2()?;
    if four != 4 || refs.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "box loss needs [N, 4] predictions and N references, got {:?} and {}",
            tape.shape(pred),
            refs.len()
        )));
    }
    let p = tape.value(pred).data();
    let r: Vec<f64> = refs.iter().flat_map(|b| b.to_array()).collect();
    let total: f64 = (0..n)
        .map(|i| {
            clipped_l1(
                &NormalizedBox::from_array(p[4 * i..4 * i + 4].try_into().expect("4")),
                &refs[i],
                clip,
                mode,
            )
        })
        .sum();
    let value = Tensor::scalar(total / n as f64);
    Ok(tape.push(
        value,
        &[pred],
        Box::new(move |a| {
            let p = a.inputs[0].data();
            let g = a.grad.item() / n as f64;
            let mut d = vec![0.0; 4 * n];
            for i in 0..n {
                let e: Vec<f64> = (0..4).map(|k| p[4 * i + k] - r[4 * i + k]).collect();
                let active = match mode {
                    ClipMode::PerCoordinate => [0, 1, 2, 3].map(|k| e[k].abs() < clip),
                    ClipMode::Summed => [e.iter().map(|v| v.abs()).sum::<f64>() < clip; 4],
                };
                for k in 0..4 {
                    if active[k] {
                        d[4 * i + k] = g * e[k].signum() * f64::from(e[k] != 0.0);
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, 4], d).expect("shape"))]
        }),
    ))
}

/// Soft Dice sums for one class of one item: `(sum p*r, sum p, sum r)`.
fn dice_sums(p: &[f64], reference: &[u8], class: u8) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sr = 0.0;
    for (&pv, &l) in p.iter().zip(reference) {
        sp += pv;
        if l == class {
            inter += pv;
            sr += 1.0;
        }
    }
    (inter, sp, sr)
}

/// Classes scored by the Dice loss; background is excluded.
const DICE_CLASSES: [u8; 2] = [LabelMask::CAVITY, LabelMask::MYOCARDIUM];

/// `1 - mean_k (2 sum p r + eps) / (sum p + sum r + eps)` over the cavity and
/// myocardium classes, averaged over the batch. `probs: [N, 3, h, w]`.
pub fn multiclass_dice_loss(tape: &mut Tape, probs: Var, refs: &[LabelMask], smooth: f64) -> Result<Var> {
    let (n, k, h, w) = tape.value(probs).dims4()?;
    if k != LabelMask::CLASSES || refs.len() != n || refs.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::ShapeMismatch(format!(
            "Dice loss needs [N, 3, h, w] probabilities and N masks of h x w, got {:?}",
            tape.shape(probs)
        )));
    }
    let hw = h * w;
    let labels: Vec<u8> = refs.iter().flat_map(|m| m.labels().iter().copied()).collect();
    let pv = tape.value(probs).data();
    let mut sums = Vec::with_capacity(n * DICE_CLASSES.len());
    let mut total = 0.0;
    for i in 0..n {
        let lab = &labels[i * hw..(i + 1) * hw];
        for &c in &DICE_CLASSES {
            let plane = &pv[(i * k + c as usize) * hw..(i * k + c as usize + 1) * hw];
            let s = dice_sums(plane, lab, c);
            total += (2.0 * s.0 + smooth) / (s.1 + s.2 + smooth);
            sums.push(s);
        }
    }
    let value = Tensor::scalar(1.0 - total / (n * DICE_CLASSES.len()) as f64);
    Ok(tape.push(
        value,
        &[probs],
        Box::new(move |a| {
            let g = -a.grad.item() / (n * DICE_CLASSES.len()) as f64;
            let mut d = vec![0.0; n * k * hw];
            for i in 0..n {
                let lab = &labels[i * hw..(i + 1) * hw];
                for (ci, &c) in DICE_CLASSES.iter().enumerate() {
                    let (inter, sp, sr) = sums[i * DICE_CLASSES.len() + ci];
                    let den = sp + sr + smooth;
                    let num = 2.0 * inter + smooth;
                    let base = (i * k + c as usize) * hw;
                    for (px, &l) in lab.iter().enumerate() {
                        let r = f64::from(l == c);
                        d[base + px] = g * (2.0 * r * den - num) / (den * den);
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, k, h, w], d).expect("shape"))]
        }),
    ))
}

/// Reference labels resampled into the crop of `bx` by nearest-neighbour
/// lookup at the crop's sample positions; outside the image is background.
/// The result carries the crop's effective pixel spacing.
pub fn dynamic_roi_reference(reference: &LabelMask, bx: &NormalizedBox, crop: (usize, usize)) -> LabelMask {
    let (h, w) = (reference.height(), reference.width());
    let (oh, ow) = crop;
    let b = bx.sanitize(h, w);
    let cols: Vec<Option<usize>> = (0..ow)
        .map(|j| {
            let y = b.source_col(j, ow, w).floor();
            (y >= 0.0 && y < w as f64).then_some(y as usize)
        })
        .collect();
    let mut labels = vec![LabelMask::BACKGROUND; oh * ow];
    for i in 0..oh {
        let x = b.source_row(i, oh, h).floor();
        if x < 0.0 || x >= h as f64 {
            continue;
        }
        for (j, c) in cols.iter().enumerate() {
            if let Some(c) = *c {
                labels[i * ow + j] = reference.get(x as usize, c);
            }
        }
    }
    let s = reference.spacing();
    let spacing = PixelSpacing {
        dx: s.dx * h as f64 * (b.x_max - b.x_min) / oh as f64,
        dy: s.dy * w as f64 * (b.y_max - b.y_min) / ow as f64,
    };
    LabelMask::new(oh, ow, labels, spacing).expect("labels copied from a valid mask")
}

/// `localization_weight * loc + segmentation_weight * seg`.
pub fn multitask_loss(tape: &mut Tape, loc: Var, seg: Var, weights: &LossWeights) -> Result<Var> {
    let a = tape.scale(loc, weights.localization_weight);
    let b = tape.scale(seg, weights.segmentation_weight);
    tape.add(a, b)
}

/// The terms of the LU-Net objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LuNetLoss {
    pub total: Var,
    pub localization: Var,
    /// Dice loss of the segmenter on the dynamic ROI reference.
    pub roi_segmentation: Var,
    /// Dice loss of the localizer's own segmentation output (mu mode only).
    pub auxiliary_segmentation: Option<Var>,
}

/// LU-Net objective: weighted box loss against the margin-expanded reference
/// boxes plus Dice on the crop against the dynamic reference; in mu mode the
/// localizer's full-frame Dice loss joins the segmentation term.
pub fn lunet_loss(
    tape: &mut Tape,
    out: &LuNetOutput,
    masks: &[LabelMask],
    ref_boxes: &[NormalizedBox],
    mode: TaskMode,
    weights: &LossWeights,
) -> Result<Var> {
    Ok(lunet_loss_terms(tape, out, masks, ref_boxes, mode, weights)?.total)
}

pub fn lunet_loss_terms(
    tape: &mut Tape,
    out: &LuNetOutput,
    masks: &[LabelMask],
    ref_boxes: &[NormalizedBox],
    mode: TaskMode,
    weights: &LossWeights,
) -> Result<LuNetLoss> {
    let localization = clipped_l1_loss(tape, out.localizer.boxes, ref_boxes, weights.clip, weights.clip_mode)?;
    let (_, _, ch, cw) = tape.value(out.crops).dims4()?;
    let used = tape.value(out.boxes).data();
    if used.len() != 4 * masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} boxes",
            masks.len(),
            used.len() / 4
        )));
    }
    let roi_refs: Vec<LabelMask> = masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let b = NormalizedBox::from_array(used[4 * i..4 * i + 4].try_into().expect("4"));
            dynamic_roi_reference(m, &b, (ch, cw))
        })
        .collect();
    let roi_segmentation = multiclass_dice_loss(tape, out.roi.probs, &roi_refs, weights.smooth)?;
    let (seg, auxiliary_segmentation) = match mode {
        TaskMode::Mo => (roi_segmentation, None),
        TaskMode::Mu => {
            let aux = multiclass_dice_loss(tape, out.localizer.seg_probs, masks, weights.smooth)?;
            (tape.add(roi_segmentation, aux)?, Some(aux))
        }
    };
    let total = multitask_loss(tape, localization, seg, weights)?;
    Ok(LuNetLoss {
        total,
        localization,
        roi_segmentation,
        auxiliary_segmentation,
    })
}
