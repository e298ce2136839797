//! Reference filters: the Kalman filter for linear-Gaussian problems of any
//! dimension, and a grid-quadrature implementation of the true filter for
//! scalar problems.

mod grid;
mod interp;
mod kalman;

pub use grid::{
    apply_transition, grid_filter, grid_predict, grid_predict_with, grid_update, GridAxis, GridDensity,
    GridParams, JointGridDensity, OFF_GRID_TOLERANCE,
};
pub use interp::pchip_resample;
pub use kalman::{kalman_filter, kalman_predict, kalman_update, KalmanState};
