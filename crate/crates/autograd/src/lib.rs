//! Reverse-mode automatic differentiation for the small dense networks used by
//! the ensembling crates.
//!
//! Tensors are row-major and image features use the `[batch, height, width,
//! channels]` layout throughout. A [`Graph`] records operations as they are
//! applied; [`Graph::backward`] walks the tape in reverse and only computes
//! gradients along paths that reach a trainable leaf, so frozen parameters
//! never pay for weight gradients.

mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use scalar::Real;
pub use tensor::Tensor;
