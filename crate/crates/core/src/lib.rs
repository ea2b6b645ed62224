//! Received-signal-strength localization of a blind radio from a square of
//! reference positions: log-normal shadowing synthesis with spatially
//! correlated noise, maximum-likelihood localization, Cramér-Rao and
//! effective-sample-size bounds, and empirical covariance/spectrum studies.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod bounds;
pub mod cli;
pub mod correlation;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod noisegen;
pub mod propagation;

pub use error::{Error, Result};
pub use geometry::{Point, SetupConfig};
pub use propagation::PropagationParams;
