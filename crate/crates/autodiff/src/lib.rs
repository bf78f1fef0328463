//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the operations needed by the segmentation model are provided:
//! convolutions (strided, padded, dilated), batched matrix products,
//! softmax, bilinear resampling, area pooling, axis permutation and
//! concatenation, and a numerically stable binary cross-entropy.

mod error;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{area_pool, bce_term, sigmoid, Conv2dOptions, Gradients, Graph, Var};
pub use tensor::Tensor;
