//! Spectral statistics of products of random matrices.
//!
//! `measures` holds the transforms of spectral measures, `bessel` the
//! multivariate Bessel ratios, `predict` the contour-integral limits,
//! `simulate` and `stats` the Monte Carlo side.

pub mod scalar;
pub mod contour;
pub mod bigfloat;
pub mod measures;
pub mod bessel;
pub mod predict;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use scalar::Real;

pub type Contour64 = contour::Contour<f64>;
pub type Contour32 = contour::Contour<f32>;
pub type Converged64 = contour::Converged<f64>;

pub use measures::SpectralMeasure;
pub use predict::{EnsembleModel, Prediction, QuadratureConfig};
pub use simulate::{Backend, FactorSpec, ProductResult};
pub use stats::{Estimate, MomentSet, StatReport};
