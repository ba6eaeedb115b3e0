//! Minimal tensor and reverse-mode autodiff engine used by the separation
//! models: dense `f32` tensors, a single-use tape, a named parameter store
//! with freezable groups, and Adam.

mod graph;
mod params;
mod tensor;

pub use graph::{BnUpdate, Graph, Var};
pub use params::{Adam, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
