//! Latency-aware structured pruning for a toy hierarchical segmentation
//! transformer, plus the mask-to-direction navigation pipeline that consumes
//! its predictions.

pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod navpipe;
pub mod profiler;
pub mod pruner;
pub mod scenegen;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
