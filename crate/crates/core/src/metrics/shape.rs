//! Shape descriptors used for anatomical plausibility.
//!
//! Simplicity is `sqrt(4 pi A) / P`: area `A` from the pixel count, perimeter
//! `P` from a Moore-neighbour trace of each 8-connected component's outer
//! boundary through pixel centers, with row steps weighted `dx`, column steps
//! `dy` and diagonal steps `sqrt(dx^2 + dy^2)`. Convexity is `A / A_hull` with
//! the hull taken over pixel centers. Both are clamped to 1.

use crate::error::{Error, Result};
use crate::grid::{LabelMask, Structure};

/// Clockwise neighbour order starting west, as `(dr, dc)`.
const RING: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

fn ring_index(dr: isize, dc: isize) -> usize {
    RING.iter().position(|&d| d == (dr, dc)).expect("unit neighbour offset")
}

struct Region<'a> {
    inside: &'a [bool],
    h: usize,
    w: usize,
}

impl Region<'_> {
    fn at(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.h
            && (c as usize) < self.w
            && self.inside[r as usize * self.w + c as usize]
    }

    /// Component labels over 8-connectivity; returns the first pixel of each
    /// component in raster order.
    fn component_starts(&self) -> Vec<(usize, usize)> {
        let mut seen = vec![false; self.inside.len()];
        let mut starts = Vec::new();
        let mut stack = Vec::new();
        for idx in 0..self.inside.len() {
            if !self.inside[idx] || seen[idx] {
                continue;
            }
            starts.push((idx / self.w, idx % self.w));
            seen[idx] = true;
            stack.push(idx);
            while let Some(i) = stack.pop() {
                let (r, c) = ((i / self.w) as isize, (i % self.w) as isize);
                for (dr, dc) in RING {
                    let (nr, nc) = (r + dr, c + dc);
                    if self.at(nr, nc) {
                        let j = nr as usize * self.w + nc as usize;
                        if !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        starts
    }

    /// Length of the traced outer boundary of the component starting at `s`.
    fn trace_length(&self, s: (usize, usize), dx: f64, dy: f64) -> f64 {
        let diag = dx.hypot(dy);
        let step = |d: usize| match RING[d] {
            (0, _) => dy,
            (_, 0) => dx,
            _ => diag,
        };
        let start = (s.0 as isize, s.1 as isize);
        // The raster-first pixel has background to its west.
        let mut cur = start;
        let mut back = 0usize;
        let mut first_move: Option<usize> = None;
        let mut length = 0.0;
        loop {
            let mut moved = None;
            for k in 1..=8 {
                let d = (back + k) % 8;
                if self.at(cur.0 + RING[d].0, cur.1 + RING[d].1) {
                    moved = Some(d);
                    break;
                }
            }
            let Some(d) = moved else {
                return 0.0; // isolated pixel
            };
            if cur == start {
                match first_move {
                    Some(f) if f == d => return length,
                    None => first_move = Some(d),
                    _ => {}
                }
            }
            let prev = RING[(d + 7) % 8];
            let next = (cur.0 + RING[d].0, cur.1 + RING[d].1);
            back = ring_index(cur.0 + prev.0 - next.0, cur.1 + prev.1 - next.1);
            length += step(d);
            cur = next;
        }
    }
}

fn nonempty(mask: &LabelMask, structure: Structure) -> Result<Vec<bool>> {
    let region = mask.region(structure);
    if !region.iter().any(|&v| v) {
        return Err(Error::EmptyStructure);
    }
    Ok(region)
}

/// Traced outer perimeter in mm, summed over 8-connected components.
pub fn perimeter(mask: &LabelMask, structure: Structure) -> Result<f64> {
    let inside = nonempty(mask, structure)?;
    let region = Region {
        inside: &inside,
        h: mask.height(),
        w: mask.width(),
    };
    let sp = mask.spacing();
    Ok(region
        .component_starts()
        .into_iter()
        .map(|s| region.trace_length(s, sp.dx, sp.dy))
        .sum())
}

/// `sqrt(4 pi A) / P`, clamped to 1; 1 for a region without perimeter.
pub fn simplicity(mask: &LabelMask, structure: Structure) -> Result<f64> {
    let p = perimeter(mask, structure)?;
    let sp = mask.spacing();
    let area = mask.structure_area_px(structure) as f64 * sp.dx * sp.dy;
    if p <= 0.0 {
        return Ok(1.0);
    }
    Ok(((4.0 * std::f64::consts::PI * area).sqrt() / p).min(1.0))
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull by Andrew's monotone chain, counter-clockwise.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let floor = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= floor + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Pixel-count area over the area of the hull of pixel centers, clamped to 1.
pub fn convexity(mask: &LabelMask, structure: Structure) -> Result<f64> {
    let inside = nonempty(mask, structure)?;
    let w = mask.width();
    let centers: Vec<[f64; 2]> = inside
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| [(i / w) as f64 + 0.5, (i % w) as f64 + 0.5])
        .collect();
    let hull_area = polygon_area(&convex_hull(&centers));
    if hull_area <= 0.0 {
        return Ok(1.0);
    }
    Ok((centers.len() as f64 / hull_area).min(1.0))
}
