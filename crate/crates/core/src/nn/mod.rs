//! Dense-network numerics shared by every learned component.

mod adam;
mod checkpoint;
pub mod gaussian;
mod gradcheck;
mod mlp;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use gaussian::GaussianDist;
pub use gradcheck::{finite_diff_check, relative_error, CoordFailure, GradCheckConfig, GradCheckReport};
pub use mlp::{Activation, BoundMlp, Layer, MlpParams};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// A fixed, ordered set of trainable tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}
