//! Monte Carlo and quadrature laboratory for the partition function of
//! the Brownian directed polymer behind the spatially mollified
//! stochastic heat equation, deep in the weak-disorder regime.
//!
//! The crate verifies, at desk scale, the Gaussian fluctuation theory of
//! that model: the decay of the covariance of the limit partition
//! function, the `T^{-(d-2)/2}` rate of the `L^2` convergence
//! `M_T -> M_infty`, the compensated bracket asymptotics, and the central
//! limit behaviour of the rescaled relative fluctuation
//! `T^{(d-2)/4} (M_{tau T} / M_T - 1)`.
//!
//! Modules mirror the pipeline: [`kernel`] builds the mollifier and its
//! autocorrelation, [`paths`] samples Brownian paths and bridges,
//! [`constants`] evaluates the closed-form constants, [`oracle`]
//! estimates annealed (noise-averaged) quantities as pure Brownian
//! expectations, [`environment`] simulates the discretized noise and the
//! quenched partition function, [`stats`] holds the reduction and test
//! machinery, and [`harness`] wires experiments to the CLI and on-disk
//! formats.

pub mod constants;
pub mod environment;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod oracle;
pub mod paths;
pub mod quad;
pub mod rng;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
pub use kernel::{CovarianceKernel, Mollifier, MollifierSpec};
pub use paths::DiscretePath;
pub use stats::McAccumulator;
