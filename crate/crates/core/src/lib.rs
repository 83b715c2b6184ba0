//! Gradient-noise covariance and curvature analysis for small ReLU MLPs.

pub mod awd;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod spectral;
pub mod suppression;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision instantiations.
pub type Dataset64 = data::Dataset<f64>;
pub type MlpParams64 = model::MlpParams<f64>;
pub type PerSampleHessian64 = model::PerSampleHessian<f64>;
pub type SymMatrix64 = numerics::SymMatrix<f64>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type FocalCache64 = awd::FocalCache<f64>;
pub type GlobalHessian64 = spectral::GlobalHessian<f64>;
