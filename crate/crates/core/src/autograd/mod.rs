//! Minimal reverse-mode automatic differentiation over NCHW `f32` tensors.
//!
//! The tape records only the operations the segmentor and discriminator
//! need. All kernels run on the calling thread in a fixed order, which makes
//! training runs bitwise reproducible.

mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{BatchMoments, Gradients, Graph, Var};
pub use params::{glorot_uniform, he_uniform, Adam, Bound, BufferId, ParamId, ParamStore};
pub use tensor::Tensor;
