//! Dense tensors and tape-based reverse-mode differentiation.

pub mod cost;
pub mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{logsumexp, softmax, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Norm clamp used by cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
