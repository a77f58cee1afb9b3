//! Language-bridged duplex transfer for referring video object segmentation.
//!
//! A small reverse-mode tensor engine, the two-stream model with its
//! word-mediated cross-modal transfer and channel-gated decoder, the
//! segmentation metrics, a synthetic moving-shapes dataset and the training
//! harness that ties them together.

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod flops;
pub mod harness;
pub mod lbdt;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
