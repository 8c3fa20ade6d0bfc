//! Joint hierarchical Gaussian-process model for a functional signal observed
//! over space-height coordinates and a scalar spatial outcome.
//!
//! The signal `z(s, x)` carries a nonseparable space-height process `u`; the
//! outcome `y(s)` loads on `u` through height weights `alpha` plus its own
//! spatial process `v`. Both processes are replaced by predictive-process
//! (knot-based) counterparts, the knot effects are integrated out, and the
//! remaining parameters are sampled by blocked random-walk Metropolis with a
//! Gibbs step for the regression coefficients.

pub mod cli;
pub mod collapsed;
pub mod config;
pub mod domain;
pub mod error;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod predict;
pub mod reduced_rank;
pub mod sampler;
pub mod simgen;

pub use domain::{JointDataset, Location, ModelParams, SpaceHeightCoord};
pub use error::{Error, Result};
