//! Distributed online tracking of a geometrically evolving scalar state over
//! a network of agents.
//!
//! Agents combine a consensus step over a symmetric doubly stochastic weight
//! matrix with an innovation step on fresh noisy observations. The crate
//! simulates both update rules, evaluates their steady-state mean-square
//! deviation in closed form, checks finite-time regret against its
//! high-probability bound, and scores candidate edges for network design.

// `!(x > 0.0)` is how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod estimator;
pub mod graph;
pub mod model;
pub mod msd;
pub mod netdesign;
pub mod numeric;
pub mod regret;
pub mod scenario;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
pub use estimator::{EstimatorKind, EstimatorSpec, ErrorSystem};
pub use graph::{CommMatrix, Graph, GraphFamily};
pub use model::{ModelParams, NoiseFamily};
pub use msd::MsdReport;
