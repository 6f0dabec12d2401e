//! Multi-stage structured pruning and distillation for decoder-only transformers.

pub mod cli;
pub mod distill;
pub mod error;
pub mod importance;
pub mod model;
pub mod pruner;
pub mod taskgen;
pub mod tensor_core;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelState, TokenBatch};
pub use tensor_core::{Graph, Tensor, Var};
