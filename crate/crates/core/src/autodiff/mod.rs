//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{AdamConfig, Param, ParamStore};
pub use tensor::Tensor;
