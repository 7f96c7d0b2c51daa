//! Minimal reverse-mode differentiation: tensors, a recording tape, parameter
//! storage with AdamW, checkpoints and a finite-difference checker.

mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{AdamW, ParamStore};
pub use tape::{gaussian_log_density, Gradients, Tape, Var};
pub use tensor::Tensor;
