//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Single-threaded and deterministic: the same inputs always produce the same
//! bits. Graphs are built eagerly as operations run and released when the
//! result tensors are dropped.

mod elementwise;
pub mod gradcheck;
mod linalg;
mod nn_ops;
mod optim;
mod param;
mod shape_ops;
mod tensor;

pub use optim::Adam;
pub use param::{ParamEntry, ParamId, ParamStore, Vars};
pub use tensor::{no_grad, Gradients, Tensor};
