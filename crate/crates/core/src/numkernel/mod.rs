//! Dense tensors, a reverse-mode autodiff tape, named parameters, a
//! finite-difference gradient oracle and a binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, relative_error, Evaluation, GradCheckReport, Objective};
pub use graph::{sigmoid, softplus, Bound, Gradients, Graph, Var};
pub use params::{ParamId, ParamRegistry};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("softmax row has every entry masked")]
    FullyMasked,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
