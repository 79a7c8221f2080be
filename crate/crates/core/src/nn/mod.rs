//! Layers, activations, loss and optimizers with explicit forward and
//! backward passes.
//!
//! Kernels are generic over [`Scalar`](crate::tensor::Scalar) so the same
//! code runs in `f32` for training and in `f64` under the gradient checker.

use thiserror::Error;

use crate::tensor::TensorError;

mod activation;
mod conv;
mod dense;
mod dropout;
pub mod gradcheck;
mod optim;
mod pool;

pub use activation::{
    cross_entropy, relu_backward, relu_forward, softmax, softmax_cross_entropy_backward, validate_one_hot,
};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_naive, conv2d_param_grads, Conv2d, Conv2dGrads};
pub use dense::{dense_backward, dense_forward, flatten, Dense, DenseGrads};
pub use dropout::{dropout_backward, dropout_forward, DropoutSpec, Mode};
pub use optim::{OptimizerKind, OptimizerState, ParamUpdate};
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, PoolIndices};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> NnError {
    NnError::Shape(TensorError::Mismatch { op, left: left.to_vec(), right: right.to_vec() })
}
