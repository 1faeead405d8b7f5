//! Dense tensors with a tape-based reverse-mode differentiator, plus the
//! AdamW optimizer, cosine learning-rate schedule, finite-difference gradient
//! checker and the binary checkpoint container.

mod checkpoint;
mod params;
mod gradcheck;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ScalarFn};
pub use params::{ParamStore, ParamVars};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, CosineSchedule, OptimState, LR_MAX, LR_MIN};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("backward needs a one-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value")]
    NonFinite,
    #[error("step {step} outside schedule of {total} steps")]
    ScheduleRange { step: usize, total: usize },
}
