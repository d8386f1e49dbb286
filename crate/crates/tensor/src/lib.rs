//! Minimal `f64` tensors with a define-by-run autodiff graph.
//!
//! Gradients are computed by [`Graph::grad`]; passing `create_graph = true`
//! keeps them differentiable, which gives exact higher-order derivatives.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
