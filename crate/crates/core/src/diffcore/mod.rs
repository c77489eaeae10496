//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! their adjoints in reverse. The op set is exactly what the networks need:
//! convolution, pooling, dense layers, activations, channel concatenation,
//! nearest upsampling and the bilinear [`crop_resize`](Tape::crop_resize).

mod crop;
mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use crop::NormalizedBox;
pub use gradcheck::check_gradients;
pub use params::{ParamStore, FORMAT_VERSION, MAGIC};
pub use tape::{BackwardArgs, BackwardFn, Tape, Var};
pub use tensor::Tensor;
