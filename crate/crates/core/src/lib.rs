//! False-positive reduction for lung CT nodule candidates.
//!
//! The pipeline resamples CT volumes to a common voxel grid, cuts
//! normalized 3D patches around each candidate at five scales, trains one
//! small 3D CNN per scale with a class-balanced chunk scheduler and
//! AdaDelta, averages the models' probabilities, and scores the result with
//! FROC analysis and scan-level bootstrap confidence intervals.
//!
//! The numerical core in [`tensornet`] is generic over [`Scalar`]; training
//! runs in `f32` and gradient verification in `f64`. The aliases below name
//! the two instantiations used throughout the crate.

pub mod candidates;
pub mod error;
pub mod evalfroc;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod resample;
pub mod scalar;
pub mod tensornet;
pub mod train;
pub mod volio;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Production tensor type.
pub type Tensor32 = tensornet::Tensor<f32>;
/// Verification tensor type used by gradient checks.
pub type Tensor64 = tensornet::Tensor<f64>;
/// Production parameter set.
pub type Parameters32 = tensornet::Parameters<f32>;
/// Verification parameter set.
pub type Parameters64 = tensornet::Parameters<f64>;
/// Production network.
pub type Network32 = tensornet::Network<f32>;
/// Verification network.
pub type Network64 = tensornet::Network<f64>;
