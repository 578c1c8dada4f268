//! Stochastic low-rank approximate natural-gradient variational inference.
//!
//! The posterior approximation is a Gaussian whose precision is stored as
//! `U Uᵀ + diag(d)`. [`linalg`] holds the structured kernels, [`models`] the
//! likelihoods with per-example gradients, [`optim`] the update rules,
//! [`metrics`] the evaluation code and [`experiment`] the runner behind the
//! `slang` binary.

pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{EigPair, LowRankDiag};
