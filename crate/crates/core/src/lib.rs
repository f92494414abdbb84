//! Variance-based structured pruning for transformer MLP blocks.
//!
//! Statistics of every hidden neuron are streamed with Welford's algorithm,
//! the globally lowest-variance neurons are removed, and their mean
//! activations are folded into the following bias so that the pruned model
//! equals the dense model with those neurons frozen at their means.

pub mod bench;
pub mod compensate;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod grad;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod stats;
pub mod table;
pub mod tensor;
pub mod train;

pub use error::{FormatError, Result, VbpError};
pub use tensor::Tensor;
