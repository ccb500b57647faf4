//! Dense `f64` tensors, a reverse-mode autodiff tape that supports
//! differentiating through gradients, small neural-network layers, and Adam.

mod graph;
pub mod io;
mod kernels;
pub mod nn;
pub mod optim;
pub mod par;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::ConvGeom;
pub use tensor::{checksum_all, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
