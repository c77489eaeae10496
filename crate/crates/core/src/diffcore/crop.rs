//! Differentiable bilinear crop-and-resize.
//!
//! Output pixel `(i, j)` of an `out_h x out_w` crop samples the source at the
//! continuous position
//!
//! ```text
//! X_i = H * (x_min + (i + 0.5) / out_h * (x_max - x_min))
//! Y_j = W * (y_min + (j + 0.5) / out_w * (y_max - y_min))
//! ```
//!
//! with pixel centers at half-integer positions, so the full-image box at the
//! input resolution reproduces the input exactly. Samples outside the image
//! read zero.

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Box as fractions of the image extent, in the same `(x_min, x_max, y_min, y_max)` order as pixel boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl NormalizedBox {
    pub const FULL: NormalizedBox = NormalizedBox {
        x_min: 0.0,
        x_max: 1.0,
        y_min: 0.0,
        y_max: 1.0,
    };

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x_min: a[0],
            x_max: a[1],
            y_min: a[2],
            y_max: a[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.x_max, self.y_min, self.y_max]
    }

    /// Clamped to `[0, 1]`, ordered, and inflated to at least two pixels of
    /// extent on an `height x width` image.
    pub fn sanitize(self, height: usize, width: usize) -> NormalizedBox {
        let (x_min, x_max, _) = sanitize_axis(self.x_min, self.x_max, height);
        let (y_min, y_max, _) = sanitize_axis(self.y_min, self.y_max, width);
        NormalizedBox {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    /// Continuous source position of crop row `i` (pixel units).
    pub fn source_row(&self, i: usize, out_h: usize, height: usize) -> f64 {
        let t = (i as f64 + 0.5) / out_h as f64;
        height as f64 * (self.x_min + t * (self.x_max - self.x_min))
    }

    /// Continuous source position of crop column `j` (pixel units).
    pub fn source_col(&self, j: usize, out_w: usize, width: usize) -> f64 {
        let t = (j as f64 + 0.5) / out_w as f64;
        width as f64 * (self.y_min + t * (self.y_max - self.y_min))
    }
}

/// Returns the sanitized `(lo, hi)` pair and its 2x2 Jacobian with respect to
/// the raw `(a, b)` pair, row-major `[dlo/da, dlo/db, dhi/da, dhi/db]`.
fn sanitize_axis(a: f64, b: f64, extent: usize) -> (f64, f64, [f64; 4]) {
    let clamp = |v: f64| {
        if v <= 0.0 {
            (0.0, 0.0)
        } else if v >= 1.0 {
            (1.0, 0.0)
        } else {
            (v, 1.0)
        }
    };
    let (ca, da) = clamp(a);
    let (cb, db) = clamp(b);
    let (mut lo, mut hi, mut jac) = if ca <= cb {
        (ca, cb, [da, 0.0, 0.0, db])
    } else {
        (cb, ca, [0.0, db, da, 0.0])
    };
    let min_extent = 2.0 / extent as f64;
    if hi - lo < min_extent {
        let center = 0.5 * (lo + hi);
        lo = center - 0.5 * min_extent;
        hi = center + 0.5 * min_extent;
        let dc = [0.5 * (jac[0] + jac[2]), 0.5 * (jac[1] + jac[3])];
        jac = [dc[0], dc[1], dc[0], dc[1]];
    }
    (lo, hi, jac)
}

struct Tap {
    r0: isize,
    frac: f64,
}

impl Tap {
    fn at(pos: f64) -> Self {
        // Pixel centers sit at half-integers.
        let u = pos - 0.5;
        let r0 = u.floor();
        Tap {
            r0: r0 as isize,
            frac: u - r0,
        }
    }
}

#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
        0.0
    } else {
        plane[r as usize * w + c as usize]
    }
}

impl Tape {
    /// Crops each image of `image: [N, C, H, W]` to its box from
    /// `boxes: [N, 4]` and resamples to `out_h x out_w`. Differentiable in both
    /// the image values and the four raw box coordinates.
    pub fn crop_resize(&mut self, image: Var, boxes: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h < 2 || out_w < 2 {
            return Err(Error::OutputTooSmall(out_h, out_w));
        }
        let (n, c, h, w) = self.value(image).dims4()?;
        if self.shape(boxes) != [n, 4] {
            return Err(Error::ShapeMismatch(format!(
                "boxes {:?} for a batch of {n}",
                self.shape(boxes)
            )));
        }
        let raw = self.value(boxes).data().to_vec();
        let mut sanitized = Vec::with_capacity(n);
        let mut jacobians = Vec::with_capacity(n);
        for b in raw.chunks(4) {
            let (x0, x1, jx) = sanitize_axis(b[0], b[1], h);
            let (y0, y1, jy) = sanitize_axis(b[2], b[3], w);
            sanitized.push(NormalizedBox {
                x_min: x0,
                x_max: x1,
                y_min: y0,
                y_max: y1,
            });
            jacobians.push((jx, jy));
        }

        let xs = self.value(image).data();
        let plane = h * w;
        let opx = out_h * out_w;
        let mut out = vec![0.0; n * c * opx];
        for (bi, bx) in sanitized.iter().enumerate() {
            let rows: Vec<Tap> = (0..out_h).map(|i| Tap::at(bx.source_row(i, out_h, h))).collect();
            let cols: Vec<Tap> = (0..out_w).map(|j| Tap::at(bx.source_col(j, out_w, w))).collect();
            for ch in 0..c {
                let src = &xs[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                let dst = &mut out[(bi * c + ch) * opx..(bi * c + ch + 1) * opx];
                for (i, rt) in rows.iter().enumerate() {
                    for (j, ct) in cols.iter().enumerate() {
                        let p00 = pixel(src, h, w, rt.r0, ct.r0);
                        let p01 = pixel(src, h, w, rt.r0, ct.r0 + 1);
                        let p10 = pixel(src, h, w, rt.r0 + 1, ct.r0);
                        let p11 = pixel(src, h, w, rt.r0 + 1, ct.r0 + 1);
                        let top = p00 + ct.frac * (p01 - p00);
                        let bot = p10 + ct.frac * (p11 - p10);
                        dst[i * out_w + j] = top + rt.frac * (bot - top);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(
            value,
            &[image, boxes],
            Box::new(move |a| {
                let xs = a.inputs[0].data();
                let g = a.grad.data();
                let mut dimg = a.needs[0].then(|| vec![0.0; n * c * plane]);
                let mut dbox = vec![0.0; n * 4];
                for (bi, bx) in sanitized.iter().enumerate() {
                    let rows: Vec<Tap> = (0..out_h).map(|i| Tap::at(bx.source_row(i, out_h, h))).collect();
                    let cols: Vec<Tap> = (0..out_w).map(|j| Tap::at(bx.source_col(j, out_w, w))).collect();
                    // d(source position)/d(sanitized coordinate)
                    let (hf, wf) = (h as f64, w as f64);
                    let mut d_lo_hi = [0.0f64; 4]; // x_min, x_max, y_min, y_max
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        let src = &xs[off..off + plane];
                        let go = &g[(bi * c + ch) * opx..(bi * c + ch + 1) * opx];
                        for (i, rt) in rows.iter().enumerate() {
                            let ti = (i as f64 + 0.5) / out_h as f64;
                            for (j, ct) in cols.iter().enumerate() {
                                let gv = go[i * out_w + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let tj = (j as f64 + 0.5) / out_w as f64;
                                let p00 = pixel(src, h, w, rt.r0, ct.r0);
                                let p01 = pixel(src, h, w, rt.r0, ct.r0 + 1);
                                let p10 = pixel(src, h, w, rt.r0 + 1, ct.r0);
                                let p11 = pixel(src, h, w, rt.r0 + 1, ct.r0 + 1);
                                let d_row = (1.0 - ct.frac) * (p10 - p00) + ct.frac * (p11 - p01);
                                let d_col = (1.0 - rt.frac) * (p01 - p00) + rt.frac * (p11 - p10);
                                d_lo_hi[0] += gv * d_row * hf * (1.0 - ti);
                                d_lo_hi[1] += gv * d_row * hf * ti;
                                d_lo_hi[2] += gv * d_col * wf * (1.0 - tj);
                                d_lo_hi[3] += gv * d_col * wf * tj;
                                if let Some(di) = dimg.as_mut() {
                                    let di = &mut di[off..off + plane];
                                    let wts = [
                                        (0, 0, (1.0 - rt.frac) * (1.0 - ct.frac)),
                                        (0, 1, (1.0 - rt.frac) * ct.frac),
                                        (1, 0, rt.frac * (1.0 - ct.frac)),
                                        (1, 1, rt.frac * ct.frac),
                                    ];
                                    for (dr, dc, wt) in wts {
                                        let (r, cc) = (rt.r0 + dr, ct.r0 + dc);
                                        if r >= 0 && cc >= 0 && (r as usize) < h && (cc as usize) < w {
                                            di[r as usize * w + cc as usize] += gv * wt;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let (jx, jy) = jacobians[bi];
                    let db = &mut dbox[bi * 4..bi * 4 + 4];
                    db[0] = d_lo_hi[0] * jx[0] + d_lo_hi[1] * jx[2];
                    db[1] = d_lo_hi[0] * jx[1] + d_lo_hi[1] * jx[3];
                    db[2] = d_lo_hi[2] * jy[0] + d_lo_hi[3] * jy[2];
                    db[3] = d_lo_hi[2] * jy[1] + d_lo_hi[3] * jy[3];
                }
                vec![
                    dimg.map(|d| Tensor::new(vec![n, c, h, w], d).expect("shape")),
                    a.needs[1].then(|| Tensor::new(vec![n, 4], dbox).expect("shape")),
                ]
            }),
        ))
    }
}
