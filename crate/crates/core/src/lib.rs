//! lfma-core: training toolkit for self-distillation with per-block
//! auxiliary classifiers and feature-map cutout.
//!
//! The crate provides a small hand-rolled NN substrate (convolution, batch
//! norm, linear, pooling) over `ndarray`, tapped residual backbones with
//! auxiliary heads, the distillation objective and its gradients, the
//! cutout augmentation, a deterministic training engine, dataset ingestion,
//! and evaluation/reporting utilities.

pub mod backbone;
pub mod ckpt;
pub mod config;
pub mod cutout;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod train;

pub use error::{LfmaError, Result};
