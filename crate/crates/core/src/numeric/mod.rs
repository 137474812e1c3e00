//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod graph;
mod kernels;
mod optim;
mod param;
mod tensor;

pub use graph::{gelu, log_sigmoid, sigmoid, Graph, Var};
pub use optim::AdamW;
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{numel, strides, Tensor};
