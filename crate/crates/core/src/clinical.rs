//! Biplane method-of-discs volumetry, ejection fraction and agreement
//! statistics.
//!
//! The long axis is the principal eigenvector of the cavity's pixel-center
//! covariance (in mm), oriented toward +x, with +x chosen for isotropic
//! regions. Each disc diameter is the chord of the region along the
//! perpendicular through its slab center, computed exactly against the pixel
//! cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMask, Structure};

/// Clinical convention for the method of discs.
pub const DEFAULT_DISCS: usize = 20;

/// Principal axis of a cavity region. Points are continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongAxis {
    /// Endpoint at the smaller projection (toward the top of the image).
    pub apex: [f64; 2],
    /// Endpoint at the larger projection.
    pub base: [f64; 2],
    /// Unit direction in mm space, apex to base.
    pub direction: [f64; 2],
    pub length_mm: f64,
}

pub fn long_axis(mask: &LabelMask) -> Result<LongAxis> {
    let sp = mask.spacing();
    let w = mask.width();
    let pts: Vec<[f64; 2]> = mask
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| Structure::Endo.contains(l))
        .map(|(i, _)| [((i / w) as f64 + 0.5) * sp.dx, ((i % w) as f64 + 0.5) * sp.dy])
        .collect();
    match pts.len() {
        0 => return Err(Error::EmptyStructure),
        n if n < 3 => return Err(Error::DegenerateRegion(n)),
        _ => {}
    }
    let n = pts.len() as f64;
    let mean = [
        pts.iter().map(|p| p[0]).sum::<f64>() / n,
        pts.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let (a, b) = (p[0] - mean[0], p[1] - mean[1]);
        sxx += a * a;
        sxy += a * b;
        syy += b * b;
    }
    let u = principal_direction(sxx / n, sxy / n, syy / n);
    let proj: Vec<f64> = pts
        .iter()
        .map(|p| (p[0] - mean[0]) * u[0] + (p[1] - mean[1]) * u[1])
        .collect();
    let half = 0.5 * (u[0].abs() * sp.dx + u[1].abs() * sp.dy);
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min) - half;
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max) + half;
    let at = |t: f64| [(mean[0] + t * u[0]) / sp.dx, (mean[1] + t * u[1]) / sp.dy];
    Ok(LongAxis {
        apex: at(lo),
        base: at(hi),
        direction: u,
        length_mm: hi - lo,
    })
}

/// Unit eigenvector of the larger eigenvalue of `[[a, b], [b, c]]`, with a
/// non-negative x component; +x when the eigenvalues coincide.
fn principal_direction(a: f64, b: f64, c: f64) -> [f64; 2] {
    let scale = a.abs().max(c.abs()).max(f64::MIN_POSITIVE);
    let half_gap = (0.5 * (a - c)).hypot(b);
    if half_gap <= 1e-12 * scale {
        return [1.0, 0.0];
    }
    let lambda = 0.5 * (a + c) + half_gap;
    // Pick the better-conditioned of the two eigenvector forms.
    let v = if (lambda - c).abs() >= (lambda - a).abs() {
        [lambda - c, b]
    } else {
        [b, lambda - a]
    };
    let norm = v[0].hypot(v[1]);
    let mut u = [v[0] / norm, v[1] / norm];
    if u[0] < 0.0 || (u[0] == 0.0 && u[1] < 0.0) {
        u = [-u[0], -u[1]];
    }
    u
}

/// Disc diameters in mm along `axis`. Slab `i` spans `[i, i + 1) * L / n` from
/// the apex; its diameter is the extent of the region along the perpendicular
/// line through the slab center. Empty slabs give 0.
pub fn disc_diameters(mask: &LabelMask, axis: &LongAxis, n_discs: usize) -> Result<Vec<f64>> {
    if n_discs < 4 {
        return Err(Error::InvalidConfig(format!("need at least 4 discs, got {n_discs}")));
    }
    let sp = mask.spacing();
    let w = mask.width();
    let cells: Vec<(usize, usize)> = mask
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| Structure::Endo.contains(l))
        .map(|(i, _)| (i / w, i % w))
        .collect();
    if cells.is_empty() {
        return Err(Error::EmptyStructure);
    }
    let u = axis.direction;
    // Perpendicular unit vector in mm, and the same line per mm in pixel units.
    let v = [-u[1], u[0]];
    let v_px = [v[0] / sp.dx, v[1] / sp.dy];
    let apex_mm = [axis.apex[0] * sp.dx, axis.apex[1] * sp.dy];
    let step = axis.length_mm / n_discs as f64;
    let diameters = (0..n_discs)
        .map(|i| {
            let t = (i as f64 + 0.5) * step;
            let o = [(apex_mm[0] + t * u[0]) / sp.dx, (apex_mm[1] + t * u[1]) / sp.dy];
            chord_extent(&cells, o, v_px)
        })
        .collect();
    Ok(diameters)
}

/// Extent of `{s : o + s * d in some cell}`; cells are unit squares
/// `[r, r+1) x [c, c+1)` and `s` is in the units of `d`'s parameter (mm).
fn chord_extent(cells: &[(usize, usize)], o: [f64; 2], d: [f64; 2]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(r, c) in cells {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for (origin, dir, cell) in [(o[0], d[0], r as f64), (o[1], d[1], c as f64)] {
            if dir == 0.0 {
                if origin < cell || origin >= cell + 1.0 {
                    t0 = f64::INFINITY;
                }
            } else {
                let a = (cell - origin) / dir;
                let b = (cell + 1.0 - origin) / dir;
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t1 > t0 {
            lo = lo.min(t0);
            hi = hi.max(t1);
        }
    }
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

/// Biplane method of discs, in ml. Each view uses its own long axis; the disc
/// height is `max(L_2CH, L_4CH) / n_discs`.
pub fn simpson_biplane(endo_2ch: &LabelMask, endo_4ch: &LabelMask, n_discs: usize) -> Result<f64> {
    let ax2 = long_axis(endo_2ch)?;
    let ax4 = long_axis(endo_4ch)?;
    let a = disc_diameters(endo_2ch, &ax2, n_discs)?;
    let b = disc_diameters(endo_4ch, &ax4, n_discs)?;
    let length = ax2.length_mm.max(ax4.length_mm);
    let sum: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok(std::f64::consts::PI / 4.0 * sum * length / n_discs as f64 / 1000.0)
}

/// `100 * (edv - esv) / edv`, in percent.
pub fn ejection_fraction(edv: f64, esv: f64) -> Result<f64> {
    if edv.is_nan() || edv <= 0.0 {
        return Err(Error::NonPositiveEdv(edv));
    }
    Ok(100.0 * (edv - esv) / edv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientIndices {
    pub edv: f64,
    pub esv: f64,
    pub ef: f64,
}

impl PatientIndices {
    pub fn from_volumes(edv: f64, esv: f64) -> Result<Self> {
        Ok(Self {
            edv,
            esv,
            ef: ejection_fraction(edv, esv)?,
        })
    }

    /// Indices from the four cavity masks.
    pub fn from_masks(
        ed_2ch: &LabelMask,
        ed_4ch: &LabelMask,
        es_2ch: &LabelMask,
        es_4ch: &LabelMask,
        n_discs: usize,
    ) -> Result<Self> {
        let edv = simpson_biplane(ed_2ch, ed_4ch, n_discs)?;
        let esv = simpson_biplane(es_2ch, es_4ch, n_discs)?;
        Self::from_volumes(edv, esv)
    }

    /// Whether `0 <= esv <= edv`.
    pub fn is_physiological(&self) -> bool {
        self.esv >= 0.0 && self.esv <= self.edv
    }
}

/// Agreement between a predicted and a reference series. `loa` uses the
/// population standard deviation of the differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub corr: f64,
    pub bias: f64,
    pub loa: f64,
    pub mae: f64,
}

/// Pearson correlation, bias, limits of agreement and mean absolute error.
/// A constant prediction series has correlation 0.
pub fn agreement_stats(pred: &[f64], reference: &[f64]) -> Result<AgreementStats> {
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch(pred.len(), reference.len()));
    }
    let n = pred.len();
    if n < 3 {
        return Err(Error::DegenerateSeries(format!("need at least 3 values, got {n}")));
    }
    let nf = n as f64;
    let mp = pred.iter().sum::<f64>() / nf;
    let mr = reference.iter().sum::<f64>() / nf;
    let (mut spp, mut srr, mut spr) = (0.0, 0.0, 0.0);
    for (p, r) in pred.iter().zip(reference) {
        spp += (p - mp) * (p - mp);
        srr += (r - mr) * (r - mr);
        spr += (p - mp) * (r - mr);
    }
    if srr == 0.0 {
        return Err(Error::DegenerateSeries("reference series is constant".into()));
    }
    let corr = if spp == 0.0 {
        0.0
    } else {
        (spr / (spp.sqrt() * srr.sqrt())).clamp(-1.0, 1.0)
    };
    let diffs: Vec<f64> = pred.iter().zip(reference).map(|(p, r)| p - r).collect();
    let bias = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - bias) * (d - bias)).sum::<f64>() / nf;
    let mae = diffs.iter().map(|d| d.abs()).sum::<f64>() / nf;
    Ok(AgreementStats {
        corr,
        bias,
        loa: 1.96 * var.sqrt(),
        mae,
    })
}
