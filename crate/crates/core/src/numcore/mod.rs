//! Tensors and reverse-mode autodiff. Everything the rest of the engine
//! computes with lives here: f32 storage, f64 accumulation, a closed
//! primitive set, and a finite-difference gradient checker.

mod graph;
mod tensor;

pub use graph::{grad_check, Bindings, Graph, GraphError, NodeId};
pub use tensor::{Tensor, TensorError};
