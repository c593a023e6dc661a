//! Dense matrices with a reverse-mode tape, AdamW, finite-difference gradient
//! checking and binary checkpoints.

mod adamw;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamW};
pub use checkpoint::{
    encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::{normal, trunc_normal, ParamEntry, ParamStore};
pub use tape::{gelu, Gradients, Tape, Var};
pub use tensor::{DType, Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
