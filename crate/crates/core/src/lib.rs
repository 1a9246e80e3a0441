//! Training convolutional networks with projected weights and measuring
//! their robustness to weight distortions.
//!
//! - [`nn`]: tensors in, logits out, exact gradients back.
//! - [`projections`]: the projection/distortion catalog applied to weights.
//! - [`trainer`]: projected forward/backward, full-precision updates, clipping.
//! - [`harness`]: distortion evaluation with batch-norm recompute and sweeps.
//! - [`metrics`]: effective bits, projection gap, activation correlation.
//! - [`io`]: datasets, checkpoints, configuration and report files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod projections;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use nn::{LayerSpec, Mode, Network};
pub use projections::{ProjectionKind, ProjectionSpec};
pub use tensor::Tensor;
