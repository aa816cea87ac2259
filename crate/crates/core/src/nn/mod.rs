//! Minimal dense-tensor toolkit: parameters, a differentiation tape and Adam.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{attention_forward, bce_with_logits_mean, sigmoid, softmax_in_place, Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
