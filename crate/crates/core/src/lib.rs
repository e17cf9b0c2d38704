//! Numeric core for variation-aware adaptation of a camera + lidar fusion
//! detector: tensors and reverse-mode autodiff, the toy fusion model,
//! LoRA/adapter injection, contrastive pretraining, variant deltas, sensor
//! distortion simulators, synthetic scenes and detection metrics.
//!
//! The crate is `no_std` and needs only an allocator. File IO, threading and
//! the command line live in the `readi` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod codec;
pub mod contrastive;
pub mod distort;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod model;
pub mod real;
pub mod scene;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod variant;

pub use error::{Error, Result};
pub use params::{Overlay, Overrides, ParamId, ParamKind, ParamSource, ParamStore};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
