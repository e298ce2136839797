//! Exact, particle, and ensemble Kalman filters for discrete-time state-space
//! models, with the measure metrics used to compare them.
//!
//! * [`measures`]: Gaussian and empirical measures, sampling, moment matching.
//! * [`models`]: problem definitions, simulation, built-in test problems.
//! * [`exact`]: the Kalman filter and a grid-quadrature true filter (1D).
//! * [`pf`]: the bootstrap particle filter.
//! * [`enkf`]: the ensemble Kalman filter and its mean-field Gaussian recursion.
//! * [`metrics`]: weighted total variation, the random-measure metric, and the
//!   Gaussian-mismatch functional.
//! * [`harness`]: experiment configuration, execution, and output.

// `!(x > 0.0)` style checks are deliberate: NaN has to fail them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod enkf;
pub mod error;
pub mod exact;
pub mod harness;
pub mod measures;
pub mod metrics;
pub mod models;
mod par;
pub mod pf;
pub mod rng;

pub use error::{Error, Result};
pub use measures::{EmpiricalMeasure, GaussianMeasure};
pub use models::{DataRecord, StateSpaceModel};
pub use rng::RngStream;
