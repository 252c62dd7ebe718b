//! Small dense-tensor numeric core with reverse-mode differentiation.
//!
//! Values are two dimensional, reductions are sequential, and every kernel is
//! generic over `f32` (training) and `f64` (gradient verification).

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, DynTensor, IntoDyn, CKPT_MAGIC, CKPT_VERSION};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, rel_error, GradCheckReport};
pub use scalar::{DType, Scalar};
pub use sparse::SparseRows;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
