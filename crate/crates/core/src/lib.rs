//! Carrot disease classification engine.
//!
//! A from-scratch convolutional network (forward, backward, optimizers),
//! the image preprocessing and augmentation pipeline, dataset handling with a
//! procedural stand-in corpus, the five comparison architectures with a
//! checksummed model file format, the training loop and the evaluation
//! metrics.

pub mod augment;
pub mod dataset;
pub mod eval;
pub mod image;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;

pub use tensor::{Shape, Tensor, TensorError};
