//! Weighted M-estimation for clustered multivariate data.
//!
//! Point estimation (mean, spatial median, Huber, Lp-median), sandwich
//! covariance estimation with within-cluster cross terms, per-cluster
//! weight optimization for relative efficiency, breakdown-point analysis
//! of weighted schemes, and a reproducible Monte Carlo harness.

pub mod asymptotics;
pub mod breakdown;
pub mod error;
pub mod io;
pub mod model;
pub mod reference;
pub mod reproduce;
pub mod simulation;
pub mod solver;
pub mod weight_design;

pub use error::{Error, Result};
pub use model::{ClusteredSample, EstimatorFamily, Point, WeightScheme};
pub use solver::{solve, SolveOptions, SolveResult};
