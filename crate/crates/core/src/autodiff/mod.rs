//! Minimal reverse-mode automatic differentiation over dense tensors.

mod graph;
mod tensor;

pub use graph::{ConvOpts, Graph, LinearMap, Var};
pub use tensor::{Scalar, Tensor};
