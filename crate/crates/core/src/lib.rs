//! Physics-guarded forecasting of atomic trajectories.
//!
//! A forecaster predicts per-atom displacements from a window of past
//! positions and displacements. A Morse pair potential supplies a training
//! penalty on energetically implausible predictions and a rejection rule for
//! autoregressive rollout.

pub mod dataset;
pub mod error;
pub mod forecaster;
pub mod metrics;
pub mod morse;
pub mod pipeline;
pub mod rollout;
pub mod simgen;
pub mod traj;

pub use error::{Error, Result};
