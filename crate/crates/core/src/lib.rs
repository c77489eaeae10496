//! LU-Net toolkit: a region-proposal network whose predicted box drives a
//! differentiable crop-and-resize into a segmentation U-Net, plus the
//! geometric, anatomical and clinical measurement stack used to evaluate it
//! on 2D echocardiography-like images.
//!
//! Everything runs on the CPU through the small reverse-mode engine in
//! [`diffcore`]. The [`phantom`] module supplies synthetic patients with exact
//! ground truth so the whole chain can be verified end to end.

pub mod clinical;
pub mod diffcore;
pub mod error;
pub mod grid;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod phantom;

pub use error::{Error, Result};
