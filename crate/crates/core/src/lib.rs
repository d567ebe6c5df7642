//! Desk-scale simulator for chain-style federated fine-tuning of
//! adapter-augmented layered models.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix it
//! to `f64`, which is what the simulator itself uses.

pub mod chain;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod foat;
pub mod kernels;
pub mod model;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type Graph64 = model::Graph<f64>;
pub type ModelStack64 = model::ModelStack<f64>;
pub type AdapterParams64 = model::AdapterParams<f64>;
pub type ActivationMatrix64 = foat::ActivationMatrix<f64>;
pub type ParamDelta64 = chain::ParamDelta<f64>;
