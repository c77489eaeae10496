use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Fan-in scaled uniform draw, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
/// He-uniform weights, stored at `f32` precision like the model file.
fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32 as f64).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    kernel: usize,
    bias: usize,
    stride: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[c_out, c_in, k, k], c_in * k * k),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { kernel, bias, stride }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.conv2d_strided(x, p[self.kernel], p[self.bias], self.stride)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    weight: usize,
    bias: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, &[d_out, d_in], d_in));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.dense(x, p[self.weight], p[self.bias])
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }
}
