//! Layer vocabulary: convolution, pooling, dense, activations and the few
//! structural and reduction ops the networks and losses are built from.

use rayon::prelude::*;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands.
/// `a` is `m x k` (or `k x m` when transposed), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = op(a) * op(b) + beta * c` over arbitrary strided views.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    (rsa, csa): (isize, isize),
    b: *const f64,
    (rsb, csb): (isize, isize),
    beta: f64,
    c: *mut f64,
    (rsc, csc): (isize, isize),
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Convolution geometry. Inputs are zero-padded into planes of
/// `hp x wp`; output pixel `(r, q)` lives at flat position `r * wq + q` with
/// `wq = wp / stride`, so for tap `(ki, kj)` the input it reads sits at
/// `stride * p + ki * wp + kj` of the padded plane. Each tap is then a
/// single strided GEMM over the padded input with no patch copy. Columns
/// `q >= wo` are scratch and ignored.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    f: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    wp: usize,
    wq: usize,
}

impl ConvGeom {
    fn new(c: usize, f: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        // Padded width rounded up to a multiple of the stride.
        let wp = (w + 2 * pad).div_ceil(stride) * stride;
        let wq = wp / stride;
        Self {
            c,
            f,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
            wp,
            wq,
        }
    }

    /// Rows in a padded plane, enough for every tap of every output row.
    fn hp(&self) -> usize {
        (self.ho - 1) * self.stride + self.k + 1
    }

    fn plane(&self) -> usize {
        self.hp() * self.wp
    }

    /// Flat output positions including scratch columns.
    fn npos(&self) -> usize {
        self.ho * self.wq
    }

    fn tap_offset(&self, ki: usize, kj: usize) -> usize {
        ki * self.wp + kj
    }

    fn pad_input(&self, x: &[f64]) -> Vec<f64> {
        let mut xp = vec![0.0; self.c * self.plane()];
        for ci in 0..self.c {
            for r in 0..self.h {
                let src = &x[(ci * self.h + r) * self.w..(ci * self.h + r + 1) * self.w];
                let o = ci * self.plane() + (r + self.pad) * self.wp + self.pad;
                xp[o..o + self.w].copy_from_slice(src);
            }
        }
        xp
    }

    fn unpad_into(&self, xp: &[f64], dx: &mut [f64]) {
        for ci in 0..self.c {
            for r in 0..self.h {
                let o = ci * self.plane() + (r + self.pad) * self.wp + self.pad;
                dx[(ci * self.h + r) * self.w..(ci * self.h + r + 1) * self.w].copy_from_slice(&xp[o..o + self.w]);
            }
        }
    }

    /// Kernel view `[F, C]` of tap `(ki, kj)` as (offset, strides).
    fn kernel_view(&self, ki: usize, kj: usize) -> (usize, (isize, isize)) {
        let kk = self.k * self.k;
        (ki * self.k + kj, ((self.c * kk) as isize, kk as isize))
    }

    fn forward_item(&self, x: &[f64], kernel: &[f64], bias: &[f64], out: &mut [f64]) {
        let xp = self.pad_input(x);
        let np = self.npos();
        let mut acc = vec![0.0; self.f * np];
        for ki in 0..self.k {
            for kj in 0..self.k {
                let (ko, ks) = self.kernel_view(ki, kj);
                let off = self.tap_offset(ki, kj);
                // SAFETY: the views stay inside `kernel`, `xp` (hp() leaves a
                // spare row for the last scratch column) and `acc`.
                unsafe {
                    gemm_strided(
                        self.f,
                        self.c,
                        np,
                        kernel.as_ptr().add(ko),
                        ks,
                        xp.as_ptr().add(off),
                        (self.plane() as isize, self.stride as isize),
                        1.0,
                        acc.as_mut_ptr(),
                        (np as isize, 1),
                    );
                }
            }
        }
        for fi in 0..self.f {
            for r in 0..self.ho {
                let src = &acc[fi * np + r * self.wq..fi * np + r * self.wq + self.wo];
                let dst = &mut out[(fi * self.ho + r) * self.wo..(fi * self.ho + r + 1) * self.wo];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[fi];
                }
            }
        }
    }

    /// Adds this item's kernel gradient into `dk` and returns the input gradient if requested.
    fn backward_item(
        &self,
        x: &[f64],
        kernel: &[f64],
        gout: &[f64],
        dk: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let np = self.npos();
        let mut gp = vec![0.0; self.f * np];
        for fi in 0..self.f {
            for r in 0..self.ho {
                let src = &gout[(fi * self.ho + r) * self.wo..(fi * self.ho + r + 1) * self.wo];
                gp[fi * np + r * self.wq..fi * np + r * self.wq + self.wo].copy_from_slice(src);
            }
        }
        let xp = self.pad_input(x);
        let mut dxp = need_dx.then(|| vec![0.0; self.c * self.plane()]);
        for ki in 0..self.k {
            for kj in 0..self.k {
                let (ko, ks) = self.kernel_view(ki, kj);
                let off = self.tap_offset(ki, kj);
                // SAFETY: as in forward_item; the dx view writes each padded
                // element at most once per call since stride * np < plane().
                unsafe {
                    gemm_strided(
                        self.f,
                        np,
                        self.c,
                        gp.as_ptr(),
                        (np as isize, 1),
                        xp.as_ptr().add(off),
                        (self.stride as isize, self.plane() as isize),
                        1.0,
                        dk.as_mut_ptr().add(ko),
                        ks,
                    );
                    if let Some(dxp) = dxp.as_mut() {
                        gemm_strided(
                            self.c,
                            self.f,
                            np,
                            kernel.as_ptr().add(ko),
                            (ks.1, ks.0),
                            gp.as_ptr(),
                            (np as isize, 1),
                            1.0,
                            dxp.as_mut_ptr().add(off),
                            (self.plane() as isize, self.stride as isize),
                        );
                    }
                }
            }
        }
        dxp.map(|dxp| {
            let mut dx = vec![0.0; self.c * self.h * self.w];
            self.unpad_into(&dxp, &mut dx);
            dx
        })
    }
}

impl Tape {
    /// Same-padded 2D cross-correlation, stride 1.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.conv2d_strided(x, kernel, bias, 1)
    }

    /// Cross-correlation with zero padding `k / 2`; output size `ceil(H / stride)`.
    pub fn conv2d_strided(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (f, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c || kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "kernel {:?} incompatible with input {:?} (odd square kernel required)",
                self.shape(kernel),
                self.shape(x)
            )));
        }
        if self.shape(bias) != [f] {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} for {f} filters",
                self.shape(bias)
            )));
        }
        let g = ConvGeom::new(c, f, h, w, kh, stride);
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let bs = self.value(bias).data();
        let in_sz = c * h * w;
        let out_sz = f * g.ho * g.wo;
        let mut out = vec![0.0; n * out_sz];
        out.par_chunks_mut(out_sz)
            .enumerate()
            .for_each(|(i, o)| g.forward_item(&xs[i * in_sz..(i + 1) * in_sz], ks, bs, o));
        let value = Tensor::new(vec![n, f, g.ho, g.wo], out)?;
        Ok(self.push(
            value,
            &[x, kernel, bias],
            Box::new(move |a| {
                let xs = a.inputs[0].data();
                let ks = a.inputs[1].data();
                let gs = a.grad.data();
                let per_item: Vec<(Option<Vec<f64>>, Vec<f64>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let mut dk = vec![0.0; ks.len()];
                        let dx = g.backward_item(
                            &xs[i * in_sz..(i + 1) * in_sz],
                            ks,
                            &gs[i * out_sz..(i + 1) * out_sz],
                            &mut dk,
                            a.needs[0],
                        );
                        (dx, dk)
                    })
                    .collect();
                let mut dk = vec![0.0; ks.len()];
                let mut db = vec![0.0; f];
                let mut dx = a.needs[0].then(|| Vec::with_capacity(n * in_sz));
                for (i, (dxi, dki)) in per_item.into_iter().enumerate() {
                    for (acc, v) in dk.iter_mut().zip(&dki) {
                        *acc += v;
                    }
                    let go = &gs[i * out_sz..(i + 1) * out_sz];
                    for (fi, plane) in go.chunks(g.ho * g.wo).enumerate() {
                        db[fi] += plane.iter().sum::<f64>();
                    }
                    if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
                        dx.extend_from_slice(&dxi);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(vec![n, c, h, w], d).expect("shape")),
                    a.needs[1].then(|| Tensor::new(vec![f, c, g.k, g.k], dk).expect("shape")),
                    a.needs[2].then(|| Tensor::from_vec(db)),
                ]
            }),
        ))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatialDim(h, w));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let cand = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cand[0];
                    for &q in &cand[1..] {
                        if xs[q] > xs[best] {
                            best = q;
                        }
                    }
                    let o = (p * ho + i) * wo + j;
                    out[o] = xs[best];
                    arg[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let in_len = n * c * h * w;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a| {
                let mut dx = vec![0.0; in_len];
                for (&src, &g) in arg.iter().zip(a.grad.data()) {
                    dx[src] += g;
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx).expect("shape"))]
            }),
        ))
    }

    /// `x W^T + b` for `x: [N, D_in]`, `W: [D_out, D_in]`, `b: [D_out]`.
    pub fn dense(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, win) = self.value(weights).dims2()?;
        if win != din || self.shape(bias) != [dout] {
            return Err(Error::ShapeMismatch(format!(
                "dense: x {:?}, W {:?}, b {:?}",
                self.shape(x),
                self.shape(weights),
                self.shape(bias)
            )));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.value(bias).data().iter().copied()).collect();
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(weights).data(),
            true,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(
            value,
            &[x, weights, bias],
            Box::new(move |a| {
                let g = a.grad.data();
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, g, false, a.inputs[1].data(), false, 0.0, &mut dx);
                    Tensor::new(vec![n, din], dx).expect("shape")
                });
                let dw = a.needs[1].then(|| {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, g, true, a.inputs[0].data(), false, 0.0, &mut dw);
                    Tensor::new(vec![dout, din], dw).expect("shape")
                });
                let db = a.needs[2].then(|| {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::from_vec(db)
                });
                vec![dx, dw, db]
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(
            value,
            &[x],
            Box::new(|a| {
                let d = a.inputs[0]
                    .data()
                    .iter()
                    .zip(a.grad.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(a.grad.shape().to_vec(), d).expect("shape"))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            value,
            &[x],
            Box::new(|a| {
                let d = a
                    .output
                    .data()
                    .iter()
                    .zip(a.grad.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                vec![Some(Tensor::new(a.grad.shape().to_vec(), d).expect("shape"))]
            }),
        )
    }

    /// Softmax over axis 1 of `[N, C, H, W]`.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            let base = i * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(xs[base + k * hw + p]);
                }
                let mut s = 0.0;
                for k in 0..c {
                    let e = (xs[base + k * hw + p] - m).exp();
                    out[base + k * hw + p] = e;
                    s += e;
                }
                for k in 0..c {
                    out[base + k * hw + p] /= s;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a| {
                let y = a.output.data();
                let g = a.grad.data();
                let mut dx = vec![0.0; y.len()];
                for i in 0..n {
                    let base = i * c * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|k| y[base + k * hw + p] * g[base + k * hw + p]).sum();
                        for k in 0..c {
                            let q = base + k * hw + p;
                            dx[q] = y[q] * (g[q] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx).expect("shape"))]
            }),
        ))
    }

    /// Each pixel replicated into a 2x2 block.
    pub fn nearest_upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                let src = &xs[(p * h + i / 2) * w..(p * h + i / 2 + 1) * w];
                let dst = &mut out[(p * ho + i) * wo..(p * ho + i + 1) * wo];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[j / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a| {
                let g = a.grad.data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            dx[(p * h + i / 2) * w + j / 2] += g[(p * ho + i) * wo + j];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx).expect("shape"))]
            }),
        ))
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&self.value(b).data()[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut da = Vec::with_capacity(n * sa);
                let mut db = Vec::with_capacity(n * sb);
                for i in 0..n {
                    let row = &g[i * (sa + sb)..(i + 1) * (sa + sb)];
                    da.extend_from_slice(&row[..sa]);
                    db.extend_from_slice(&row[sa..]);
                }
                vec![
                    Some(Tensor::new(vec![n, ca, h, w], da).expect("shape")),
                    Some(Tensor::new(vec![n, cb, h, w], db).expect("shape")),
                ]
            }),
        ))
    }

    /// Reinterprets the shape; data order is unchanged.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a| vec![Some(a.grad.clone().reshape(&in_shape).expect("shape"))]),
        ))
    }

    /// Flattens `[N, ...]` into `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape
            .first()
            .ok_or_else(|| Error::ShapeMismatch("flatten of a scalar".into()))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(
            value,
            &[x],
            Box::new(|a| vec![Some(Tensor::full(a.inputs[0].shape(), a.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, &[x], Box::new(move |a| vec![Some(a.grad.map(|g| g * k))]))
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let d: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), d)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let d: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), d)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|args| {
                let g = args.grad.data();
                let shape = args.grad.shape().to_vec();
                let da = args.needs[0].then(|| {
                    let d = g.iter().zip(args.inputs[1].data()).map(|(g, y)| g * y).collect();
                    Tensor::new(shape.clone(), d).expect("shape")
                });
                let db = args.needs[1].then(|| {
                    let d = g.iter().zip(args.inputs[0].data()).map(|(g, x)| g * x).collect();
                    Tensor::new(shape.clone(), d).expect("shape")
                });
                vec![da, db]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 5 * 4).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = tape.constant(t4(2, 1, 5, 4, data.clone()));
        let k = tape.constant(t4(1, 1, 1, 1, vec![1.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn ones_kernel_sums_neighborhood() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 0.7));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        let out = tape.value(y).data();
        for r in 1..4 {
            for c in 1..4 {
                assert!((out[r * 5 + c] - 6.3).abs() < 1e-12);
            }
        }
        // corner sees four in-image taps
        assert!((out[0] - 2.8).abs() < 1e-12);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let k = tape.constant(Tensor::full(&[2, 2, 3, 3], 0.5));
        let b = tape.constant(Tensor::from_vec(vec![1.5, -2.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        let out = tape.value(y).data();
        assert!(out[..9].iter().all(|&v| v == 1.5));
        assert!(out[9..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b), Err(Error::ShapeMismatch(_))));
        let k2 = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(tape.conv2d(x, k2, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 8, 6], 1.0));
        let k = tape.constant(Tensor::full(&[3, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d_strided(x, k, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4, 3]);
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 3.0));
        let y = tape.maxpool2d(c).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(tape.maxpool2d(odd), Err(Error::OddSpatialDim(3, 4))));
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let mut tape = Tape::new();
        let x = tape.variable(t4(1, 1, 2, 2, vec![5.0, 5.0, 5.0, 5.0]));
        let y = tape.maxpool2d(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);

        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.dense(x, eye, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let zw = tape.constant(Tensor::zeros(&[3, 2]));
        let bias = tape.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let y = tape.dense(x, zw, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let z = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.4));
        let p = tape.channel_softmax(z).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let s = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = tape.sigmoid(s);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.nearest_upsample2x(x).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y).data(), &expected);
    }

    #[test]
    fn concat_checks_spatial_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = tape.constant(Tensor::full(&[2, 2, 2, 2], 2.0));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2, 2]);
        assert_eq!(&tape.value(y).data()[..8], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let c = tape.constant(Tensor::full(&[2, 1, 4, 2], 1.0));
        assert!(tape.concat_channels(a, c).is_err());
    }

    #[test]
    fn backward_of_simple_reductions() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        tape.zero_grads();
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq);
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        // idempotent after zeroing
        tape.zero_grads();
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);

        assert!(matches!(tape.backward(sq), Err(Error::NotScalarLoss(_))));
    }
}
