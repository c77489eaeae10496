use serde::{Deserialize, Serialize};

use super::{BoundingBox, LabelMask, PixelSpacing, Structure};
use crate::error::{Error, Result};

/// Smallest box containing every pixel cell of `structure`.
pub fn tight_bbox(mask: &LabelMask, structure: Structure) -> Result<BoundingBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for r in 0..mask.height() {
        let row = &mask.labels()[r * mask.width()..(r + 1) * mask.width()];
        let mut first = None;
        let mut last = 0;
        for (c, &l) in row.iter().enumerate() {
            if structure.contains(l) {
                first.get_or_insert(c);
                last = c;
            }
        }
        if let Some(first) = first {
            r0 = r0.min(r);
            r1 = r;
            c0 = c0.min(first);
            c1 = c1.max(last);
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyStructure);
    }
    Ok(BoundingBox {
        x_min: r0 as f64,
        x_max: (r1 + 1) as f64,
        y_min: c0 as f64,
        y_max: (c1 + 1) as f64,
    })
}

/// Grows a box by `m * h` along x and `m * w` along y on each side, clamped to `bounds`.
pub fn expand_bbox(bb: &BoundingBox, m: f64, bounds: &BoundingBox) -> BoundingBox {
    expand_bbox_checked(bb, m, bounds).0
}

/// Like [`expand_bbox`], also reporting whether clamping changed any coordinate.
pub fn expand_bbox_checked(bb: &BoundingBox, m: f64, bounds: &BoundingBox) -> (BoundingBox, bool) {
    debug_assert!(m >= 0.0);
    let h = bb.height();
    let w = bb.width();
    let raw = [bb.x_min - m * h, bb.x_max + m * h, bb.y_min - m * w, bb.y_max + m * w];
    let out = BoundingBox {
        x_min: raw[0].clamp(bounds.x_min, bounds.x_max),
        x_max: raw[1].clamp(bounds.x_min, bounds.x_max),
        y_min: raw[2].clamp(bounds.y_min, bounds.y_max),
        y_max: raw[3].clamp(bounds.y_min, bounds.y_max),
    };
    let clamped = out.to_array() != raw;
    (out, clamped)
}

/// Intersection over union. Two zero-area boxes give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ih = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iw = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ih * iw;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Absolute center and size errors of a predicted box, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxErrors {
    pub e_xc: f64,
    pub e_yc: f64,
    pub e_h: f64,
    pub e_w: f64,
}

pub fn bbox_errors(pred: &BoundingBox, reference: &BoundingBox, spacing: PixelSpacing) -> BoxErrors {
    BoxErrors {
        e_xc: (pred.x_center() - reference.x_center()).abs() * spacing.dx,
        e_yc: (pred.y_center() - reference.y_center()).abs() * spacing.dy,
        e_h: (pred.height() - reference.height()).abs() * spacing.dx,
        e_w: (pred.width() - reference.width()).abs() * spacing.dy,
    }
}

/// True iff every pixel cell of `structure` lies inside `bb`.
pub fn encompasses(bb: &BoundingBox, mask: &LabelMask, structure: Structure) -> Result<bool> {
    let tight = tight_bbox(mask, structure)?;
    Ok(bb.contains_box(&tight))
}
