//! Differentiable numeric substrate: tensors, a reverse-mode graph, a
//! finite-difference gradient oracle and the Adam optimizer.

mod adam;
mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use graph::{Graph, SharedMask, Var};
pub use tensor::Tensor;


#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("softmax row {0} is fully masked")]
    DegenerateRow(usize),
    #[error("contract violated: {0}")]
    Contract(String),
}
