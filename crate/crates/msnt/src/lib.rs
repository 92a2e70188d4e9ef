//! Multi-set networks toolkit.
//!
//! A small tensor engine with reverse-mode autodiff, attention blocks over
//! pairs of padded sets, a zoo of partially permutation-invariant models,
//! synthetic divergence/distinguishability tasks with exact and Monte-Carlo
//! targets, classical KL/MI estimator baselines, and a training loop.

pub mod adam;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod graph;
pub mod models;
pub mod oracles;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::{Mask, Tensor, TensorError};
