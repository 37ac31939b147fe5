//! Dense tensors with a recorded operation tape for reverse-mode gradients.

mod graph;
pub mod gradcheck;
pub mod nn;
mod params;
mod real;
mod tensor;

pub use gradcheck::{grad_check, grad_check_inputs, GradCheckReport};
pub use graph::{gelu, sigmoid, AttnMaps, BilinearTaps, ConvShape, Gradients, Graph, Var};
pub use nn::{mlp_forward, multi_head_attention, Activation, AttentionOutput, AttentionWeights};
pub use params::{normal_tensor, Bound, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
