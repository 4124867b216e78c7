//! Joint local predictive ability of a set of forecasters.
//!
//! Historical log predictive scores of `K` experts are cube-root transformed and
//! modeled with a multi-output Gaussian process over a space of pooling covariates.
//! The latent surface is integrated out analytically, kernel and covariance
//! hyperparameters are sampled with HMC, and posterior draws of every expert's
//! expected log predictive density at a query point are recovered from Gaussian
//! third moments. The draws feed locally weighted linear opinion pools.
//!
//! Module map:
//! - [`panel`]: score panels and the score/ELPD transformations
//! - [`kernels`]: SE-ARD kernel and the coregionalized cross-covariance
//! - [`model`]: priors, parameter transforms, marginal log posterior and gradient
//! - [`sampler`]: NUTS-style HMC, random-walk Metropolis, convergence diagnostics
//! - [`predict`]: conditioning at a query point, ability draws, best-expert probabilities
//! - [`pool`]: pooling schemes and backtests
//! - [`sim`]: the pseudo log-score simulation study

pub mod error;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod panel;
pub mod pool;
pub mod predict;
pub mod sampler;
pub mod sim;

pub use error::{Error, Result};
