//! Randomized gradient checks of every differentiable building block.
//!
//! Each check draws shapes and values from a seeded generator, keeps inputs
//! clear of the kinks of ReLU, max-pooling, bilinear sampling and the clipped
//! L1 loss, and compares reverse-mode gradients with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{check_gradients, NormalizedBox, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::grid::{expand_bbox, tight_bbox, LabelMask, PixelSpacing, Structure};
use crate::losses::{clipped_l1_loss, lunet_loss, multiclass_dice_loss, ClipMode, LossWeights};
use crate::nets::{BoxSource, LuNet, LuNetConfig, TaskMode};

/// Finite-difference step.
pub const EPS: f64 = 1e-6;
/// Largest accepted relative error for single ops and losses.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Largest accepted relative error for the full LU-Net objective.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

/// One gradient check: a generator of random configurations returning the
/// worst relative error between reverse-mode and central-difference gradients.
#[derive(Clone, Copy)]
pub struct GradCheck {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(&mut ChaCha8Rng) -> Result<f64>,
}

impl std::fmt::Debug for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCheck")
            .field("name", &self.name)
            .field("tolerance", &self.tolerance)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub configs: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheck {
    /// Runs `configs` random configurations; configuration `i` is seeded
    /// with `seed + i`.
    pub fn run(&self, configs: usize, seed: u64) -> Result<GradCheckResult> {
        let mut worst: f64 = 0.0;
        for i in 0..configs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let e = (self.run)(&mut rng)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        Ok(GradCheckResult {
            name: self.name.to_string(),
            configs,
            worst,
            tolerance: self.tolerance,
            passed: worst <= self.tolerance,
        })
    }
}

/// Every differentiable op, both losses and the full LU-Net objective.
pub fn gradient_checks() -> Vec<GradCheck> {
    let c = |name, run, tolerance| GradCheck { name, tolerance, run };
    vec![
        c(
            "conv2d",
            check_conv2d as fn(&mut ChaCha8Rng) -> Result<f64>,
            OP_TOLERANCE,
        ),
        c("conv2d_strided", check_conv2d_strided, OP_TOLERANCE),
        c("maxpool2d", check_maxpool, OP_TOLERANCE),
        c("dense", check_dense, OP_TOLERANCE),
        c("relu", check_relu, OP_TOLERANCE),
        c("sigmoid", check_sigmoid, OP_TOLERANCE),
        c("channel_softmax", check_softmax, OP_TOLERANCE),
        c("nearest_upsample2x", check_upsample, OP_TOLERANCE),
        c("concat_channels", check_concat, OP_TOLERANCE),
        c("reshape", check_reshape, OP_TOLERANCE),
        c("flatten", check_flatten, OP_TOLERANCE),
        c("sum", check_sum, OP_TOLERANCE),
        c("mean", check_mean, OP_TOLERANCE),
        c("scale", check_scale, OP_TOLERANCE),
        c("add", check_add, OP_TOLERANCE),
        c("sub", check_sub, OP_TOLERANCE),
        c("mul", check_mul, OP_TOLERANCE),
        c("crop_resize", check_crop_resize, OP_TOLERANCE),
        c("clipped_l1_loss", check_box_loss_per_coordinate, OP_TOLERANCE),
        c("clipped_l1_loss_summed", check_box_loss_summed, OP_TOLERANCE),
        c("multiclass_dice_loss", check_dice_loss, OP_TOLERANCE),
        c("lunet_loss", check_lunet_composite, COMPOSITE_TOLERANCE),
    ]
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values kept at least `gap` away from zero, for inputs of kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Scalar `sum(y * w)` with a fixed random weight, so every output element
/// carries a distinct upstream gradient.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let m = tape.mul(y, wv)?;
    Ok(tape.sum(m))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    let density: f64 = rng.random_range(0.0..0.6);
    let labels = (0..h * w)
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(1..=2u8)
            } else {
                0
            }
        })
        .collect();
    LabelMask::new(h, w, labels, PixelSpacing::default()).expect("labels in range")
}

fn grad(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    check_gradients(f, inputs, EPS)
}

fn check_conv(rng: &mut ChaCha8Rng, stride: usize) -> Result<f64> {
    let (n, c, f) = (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    );
    let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let x = uniform(rng, &[n, c, h, w], -1.0, 1.0);
    let kern = uniform(rng, &[f, c, k, k], -1.0, 1.0);
    let bias = uniform(rng, &[f], -1.0, 1.0);
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let wt = uniform(rng, &[n, f, ho, wo], -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.conv2d_strided(v[0], v[1], v[2], stride)?;
            project(t, y, &wt)
        },
        &[x, kern, bias],
    )
}

fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_conv(rng, 1)
}

fn check_conv2d_strided(rng: &mut ChaCha8Rng) -> Result<f64> {
    let stride = rng.random_range(2..=3);
    check_conv(rng, stride)
}

fn check_maxpool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let (h, w) = (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4));
    // Distinct values spaced apart keep every window's maximum unique.
    let len = n * c * h * w;
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    for i in (1..len).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new(vec![n, c, h, w], vals)?;
    let wt = uniform(rng, &[n, c, h / 2, w / 2], -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.maxpool2d(v[0])?;
            project(t, y, &wt)
        },
        &[x],
    )
}

fn check_dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, din, dout) = (
        rng.random_range(1..=3),
        rng.random_range(1..=6),
        rng.random_range(1..=5),
    );
    let x = uniform(rng, &[n, din], -1.0, 1.0);
    let wm = uniform(rng, &[dout, din], -1.0, 1.0);
    let b = uniform(rng, &[dout], -1.0, 1.0);
    let wt = uniform(rng, &[n, dout], -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, &wt)
        },
        &[x, wm, b],
    )
}

fn random_4d(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    ]
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = away_from_zero(rng, &shape, 1e-3);
    let wt = uniform(rng, &shape, -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, &wt)
        },
        &[x],
    )
}

fn check_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = uniform(rng, &shape, -4.0, 4.0);
    let wt = uniform(rng, &shape, -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, &wt)
        },
        &[x],
    )
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = uniform(rng, &shape, -3.0, 3.0);
    let wt = uniform(rng, &shape, -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.channel_softmax(v[0])?;
            project(t, y, &wt)
        },
        &[x],
    )
}

fn check_upsample(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = uniform(rng, &shape, -1.0, 1.0);
    let wt = uniform(rng, &[shape[0], shape[1], 2 * shape[2], 2 * shape[3]], -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.nearest_upsample2x(v[0])?;
            project(t, y, &wt)
        },
        &[x],
    )
}

fn check_concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a_shape = random_4d(rng);
    let mut b_shape = a_shape.clone();
    b_shape[1] = rng.random_range(1..=3);
    let a = uniform(rng, &a_shape, -1.0, 1.0);
    let b = uniform(rng, &b_shape, -1.0, 1.0);
    let wt = uniform(
        rng,
        &[a_shape[0], a_shape[1] + b_shape[1], a_shape[2], a_shape[3]],
        -1.0,
        1.0,
    );
    grad(
        |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, &wt)
        },
        &[a, b],
    )
}

fn check_reshape(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = uniform(rng, &shape, -1.0, 1.0);
    let target = [shape[0] * shape[1], shape[2] * shape[3]];
    let wt = uniform(rng, &target, -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.reshape(v[0], &target)?;
            project(t, y, &wt)
        },
        &[x],
    )
}

fn check_flatten(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = uniform(rng, &shape, -1.0, 1.0);
    let wt = uniform(rng, &[shape[0], shape[1] * shape[2] * shape[3]], -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.flatten(v[0])?;
            project(t, y, &wt)
        },
        &[x],
    )
}

fn check_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = uniform(rng, &shape, -1.0, 1.0);
    let k: f64 = rng.random_range(-2.0..2.0);
    grad(
        |t, v| {
            let s = t.sum(v[0]);
            Ok(t.scale(s, k))
        },
        &[x],
    )
}

fn check_mean(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = uniform(rng, &shape, -1.0, 1.0);
    let sq = uniform(rng, &shape, -1.0, 1.0);
    grad(
        |t, v| {
            // mean(x * x) makes the gradient depend on x.
            let p = t.mul(v[0], v[0])?;
            let q = t.constant(sq.clone());
            let y = t.add(p, q)?;
            Ok(t.mean(y))
        },
        &[x],
    )
}

fn check_scale(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = random_4d(rng);
    let x = uniform(rng, &shape, -1.0, 1.0);
    let k: f64 = rng.random_range(-3.0..3.0);
    let wt = uniform(rng, &shape, -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.scale(v[0], k);
            project(t, y, &wt)
        },
        &[x],
    )
}

fn binary_inputs(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    let shape = random_4d(rng);
    (
        uniform(rng, &shape, -1.0, 1.0),
        uniform(rng, &shape, -1.0, 1.0),
        uniform(rng, &shape, -1.0, 1.0),
    )
}

fn check_add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, wt) = binary_inputs(rng);
    grad(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, &wt)
        },
        &[a, b],
    )
}

fn check_sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, wt) = binary_inputs(rng);
    grad(
        |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, &wt)
        },
        &[a, b],
    )
}

fn check_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, wt) = binary_inputs(rng);
    grad(
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, &wt)
        },
        &[a, b],
    )
}

/// Box coordinates whose sampling grid stays clear of pixel-cell boundaries,
/// where bilinear interpolation has a kink.
fn smooth_box(rng: &mut ChaCha8Rng, h: usize, w: usize, oh: usize, ow: usize) -> [f64; 4] {
    loop {
        let x0: f64 = rng.random_range(0.05..0.45);
        let x1: f64 = rng.random_range(0.55..0.95);
        let y0: f64 = rng.random_range(0.05..0.45);
        let y1: f64 = rng.random_range(0.55..0.95);
        let b = NormalizedBox::from_array([x0, x1, y0, y1]);
        let rows = (0..oh).map(|i| b.source_row(i, oh, h));
        let cols = (0..ow).map(|j| b.source_col(j, ow, w));
        let clear = |s: f64| {
            let f = (s - 0.5).rem_euclid(1.0);
            f > 1e-3 && f < 1.0 - 1e-3
        };
        if rows.into_iter().all(clear) && cols.into_iter().all(clear) {
            return [x0, x1, y0, y1];
        }
    }
}

fn check_crop_resize(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let (h, w) = (rng.random_range(6..=10), rng.random_range(6..=10));
    let (oh, ow) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let image = uniform(rng, &[n, c, h, w], 0.0, 1.0);
    let boxes: Vec<f64> = (0..n).flat_map(|_| smooth_box(rng, h, w, oh, ow)).collect();
    let boxes = Tensor::new(vec![n, 4], boxes)?;
    let wt = uniform(rng, &[n, c, oh, ow], -1.0, 1.0);
    grad(
        |t, v| {
            let y = t.crop_resize(v[0], v[1], oh, ow)?;
            project(t, y, &wt)
        },
        &[image, boxes],
    )
}

fn check_box_loss(rng: &mut ChaCha8Rng, mode: ClipMode) -> Result<f64> {
    let n = rng.random_range(1..=4);
    let clip: f64 = rng.random_range(0.2..0.99);
    loop {
        let pred = uniform(rng, &[n, 4], 0.0, 1.0);
        let refs: Vec<NormalizedBox> = (0..n)
            .map(|_| NormalizedBox::from_array(std::array::from_fn(|_| rng.random_range(0.0..1.0))))
            .collect();
        // Stay clear of the kinks at zero error and at the clip level.
        let errs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..4)
                    .map(|k| (pred.data()[4 * i + k] - refs[i].to_array()[k]).abs())
                    .collect()
            })
            .collect();
        let clear = |e: f64| e > 1e-3 && (e - clip).abs() > 1e-3;
        let ok = match mode {
            ClipMode::PerCoordinate => errs.iter().flatten().all(|&e| clear(e)),
            ClipMode::Summed => errs
                .iter()
                .all(|e| e.iter().all(|&v| v > 1e-3) && clear(e.iter().sum())),
        };
        if ok {
            return grad(|t, v| clipped_l1_loss(t, v[0], &refs, clip, mode), &[pred]);
        }
    }
}

fn check_box_loss_per_coordinate(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_box_loss(rng, ClipMode::PerCoordinate)
}

fn check_box_loss_summed(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_box_loss(rng, ClipMode::Summed)
}

fn check_dice_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let probs = uniform(rng, &[n, 3, h, w], 0.01, 1.0);
    let refs: Vec<LabelMask> = (0..n).map(|_| random_mask(rng, h, w)).collect();
    let smooth: f64 = rng.random_range(0.1..2.0);
    grad(|t, v| multiclass_dice_loss(t, v[0], &refs, smooth), &[probs])
}

/// Fresh networks have all-zero biases, so a dead receptive field puts a
/// pre-activation exactly on the ReLU kink; random biases move it off.
fn jitter_biases(net: &mut LuNet, rng: &mut ChaCha8Rng) {
    for store in net.stores_mut() {
        for i in 0..store.len() {
            if store.names()[i].ends_with("bias") {
                for v in store.get_mut(i).data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
    }
}

/// Full LU-Net objective on a small network. The image and a random subset of
/// parameter tensors are checked; the remaining parameters are constants.
fn check_lunet_composite(rng: &mut ChaCha8Rng) -> Result<f64> {
    let margin = rng.random_range(0.0..0.2);
    let mut config = LuNetConfig::sized(16, 8, 2, 4, vec![8, 4], margin);
    config.localizer.mode = if rng.random_bool(0.5) {
        TaskMode::Mu
    } else {
        TaskMode::Mo
    };
    let mut net = LuNet::new(config.clone(), rng.random())?;
    jitter_biases(&mut net, rng);
    let n = rng.random_range(1..=2);
    let image = uniform(rng, &[n, 1, 16, 16], 0.0, 1.0);
    let masks: Vec<LabelMask> = (0..n)
        .map(|_| {
            let mut m = LabelMask::zeros(16, 16, PixelSpacing::default());
            let (r0, c0) = (rng.random_range(2..6), rng.random_range(2..6));
            let (r1, c1) = (rng.random_range(10..14), rng.random_range(10..14));
            for r in r0..r1 {
                for c in c0..c1 {
                    let inner = r > r0 + 1 && r + 2 < r1 && c > c0 + 1 && c + 2 < c1;
                    m.set(
                        r,
                        c,
                        if inner {
                            LabelMask::CAVITY
                        } else {
                            LabelMask::MYOCARDIUM
                        },
                    );
                }
            }
            m
        })
        .collect();
    let refs: Vec<NormalizedBox> = masks
        .iter()
        .map(|m| {
            let b = tight_bbox(m, Structure::Epi).expect("ring is nonempty");
            NormalizedBox::from_array(expand_bbox(&b, margin, &m.extent()).normalized(16, 16))
        })
        .collect();
    let weights = LossWeights::default();
    let [loc_store, seg_store] = net.stores();
    let pick = |rng: &mut ChaCha8Rng, s: &ParamStore| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        idx.truncate(2);
        idx
    };
    let loc_pick = pick(rng, loc_store);
    let seg_pick = pick(rng, seg_store);
    let mut inputs = vec![image];
    inputs.extend(loc_pick.iter().map(|&i| loc_store.get(i).clone()));
    inputs.extend(seg_pick.iter().map(|&i| seg_store.get(i).clone()));
    let bind = |t: &mut Tape, s: &ParamStore, picked: &[usize], vars: &[Var]| -> Vec<Var> {
        (0..s.len())
            .map(|i| match picked.iter().position(|&p| p == i) {
                Some(j) => vars[j],
                None => t.constant(s.get(i).clone()),
            })
            .collect()
    };
    grad(
        |t, v| {
            let lp = bind(t, loc_store, &loc_pick, &v[1..1 + loc_pick.len()]);
            let sp = bind(t, seg_store, &seg_pick, &v[1 + loc_pick.len()..]);
            let out = net.forward(t, &lp, &sp, v[0], &BoxSource::Predicted)?;
            lunet_loss(t, &out, &masks, &refs, config.localizer.mode, &weights)
        },
        &inputs,
    )
}
