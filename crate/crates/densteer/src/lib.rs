//! Steers the state distribution of a controlled nonlinear stochastic system
//! between two Gaussian-mixture boundary distributions.
//!
//! The problem is decomposed into one covariance-steering subproblem per pair
//! of boundary mixture components, each linearized around its own
//! minimum-energy reference trajectory.  A discrete optimal-transport plan
//! couples the two mixtures, and the per-pair affine feedback laws are blended
//! into a single state-dependent mixture policy.  A single-linearization
//! baseline (one affine law around one global reference) is provided for
//! comparison, together with Monte Carlo evaluation and distribution metrics.

// Links the system BLAS/LAPACK used by the semidefinite solver.
use openblas_src as _;

pub mod config;
pub mod coupling;
pub mod cov_steer;
pub mod dynamics;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod ltv;
pub mod mean_ocp;
pub mod metrics;
pub mod output;
pub mod pipeline;
pub mod policy;
pub mod sim;

pub mod cli;

pub use error::{Error, Result};
