//! Continuous space-time Gaussian-process state estimation for continuum
//! robots.
//!
//! The robot state over arclength `s` and time `t` is a Gaussian process
//! whose discretization on an `N × K` knot grid yields a factor graph with
//! one unary, `N − 1` spatial, `K − 1` temporal and `(N − 1)(K − 1)`
//! quaternary prior factors. Its precision is block-tridiagonal in time with
//! block-tridiagonal spatial blocks, so a banded Cholesky solve is linear in
//! `K`. Posterior mean and covariance can be queried anywhere in the grid
//! hull by interpolating within a single cell.

pub mod error;
pub mod graph;
pub mod liegroup;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod prior;
pub mod query;
pub mod sensors;
pub mod sim;
pub mod solver;

pub use error::*;
pub use graph::{build_grid, build_prior_factors, precision_pattern, FactorSet, Grid, GridInit};
pub use liegroup::{Pose, Rotation, Twist};
pub use prior::{ChartState, Mat24, NodeState, PriorFactor, PriorParams, Vec24};
pub use query::{query, query_covariance, query_mean};
pub use sensors::{bind_offgrid, Measurement, MeasurementFactor, MeasurementKind};
pub use solver::{gauss_newton, Posterior, SolveReport, SolverOptions};
