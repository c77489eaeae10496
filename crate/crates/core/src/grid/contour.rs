use super::{Contour, LabelMask, Structure};
use crate::error::{Error, Result};

/// Centers of structure pixels with at least one 4-neighbor outside the
/// structure, in row-major order. The image border counts as outside.
pub fn mask_to_contour(mask: &LabelMask, structure: Structure) -> Result<Contour> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.in_structure(r as usize, c as usize, structure)
    };
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.in_structure(r, c, structure) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !(inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1)) {
                points.push([r as f64 + 0.5, c as f64 + 0.5]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyStructure);
    }
    Contour::new(points, mask.spacing())
}
