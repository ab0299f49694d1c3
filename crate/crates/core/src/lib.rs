//! Highway deep neural networks for small-footprint acoustic models.
//!
//! The numeric core ([`linalg`], [`network`], [`losses`], [`lattice`],
//! [`training`]) is generic over the element type through [`Scalar`]. The
//! aliases below fix it to `f64`, which training, gradient checks and the
//! on-disk model format use; the `32`-suffixed ones fix it to `f32`.

// Range checks are written as `!(x > 0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lattice;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use network::{Architecture, GateConfig, ModelConfig, ParamGroup, ParamMask};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Parameters = network::Parameters<f64>;
pub type Parameters32 = network::Parameters<f32>;
pub type ForwardTrace = network::ForwardTrace<f64>;
pub type LossResult = losses::LossResult<f64>;
pub type TargetBatch = losses::TargetBatch<f64>;
pub type Lattice = lattice::Lattice<f64>;
pub type SmbrResult = lattice::SmbrResult<f64>;
