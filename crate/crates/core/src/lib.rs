//! Personalized keyword gating in front of a transformer news
//! recommender: a light CNN/LSTM gate picks the top-K tokens of each
//! clicked item, and only those tokens reach the user-side transformer.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`).

pub mod cli;
pub mod config;
pub mod efficiency;
pub mod error;
pub mod gating;
pub mod model;
pub mod numerics;
pub mod recall;
pub mod scalar;
pub mod text;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type GateFormer64 = model::GateFormer<f64>;
pub type GateFormer32 = model::GateFormer<f32>;
