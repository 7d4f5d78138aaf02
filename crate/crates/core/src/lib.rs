//! Momentum-teacher knowledge distillation at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and holds every piece of the
//! training engine that does not touch the filesystem:
//!
//! - [`tape`]: dense `f64` tensors with tape-based reverse-mode autodiff.
//! - [`nn`]: MLP encoders, projection heads, multi-head self-attention and
//!   linear classifiers, bundled into a [`nn::ModelStack`].
//! - [`distill`]: the momentum teacher, the negative queue and the task gate.
//! - [`losses`]: cross-entropy, temperature-scaled KL and InfoNCE.
//! - [`optim`]: Adam with bias correction.
//! - [`trainer`]: teacher pretraining, fine-tuning baselines and the
//!   distillation step.
//! - [`synth`]: Gaussian-mixture tasks for the same / relevant / irrelevant
//!   distillation regimes.
//! - [`metrics`]: accuracy, F1 variants, quadratic kappa, silhouette,
//!   class correlations and majority voting.
//!
//! File formats, configuration text and the CLI live in the `moma` crate.
#![no_std]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod config;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::DistillConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
