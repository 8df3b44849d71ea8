//! Primal-dual learned moving horizon estimation (PD-MHE) for linear systems
//! with box-constrained, truncated-Gaussian noise.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: system matrices, constraint boxes, noise sampling, trajectories
//!   and the information vector handed to the learned estimators.
//! * [`qp`]: a small dense convex QP solver (ADMM with an active-set polish).
//! * [`mhe`]: the constrained MHE problem, its cost, the arrival-cost Riccati
//!   recursion and the Kalman-filter baseline.
//! * [`dual`]: the explicit dual of the MHE problem, its gradient, dual ascent
//!   and primal recovery.
//! * [`approximator`]: a from-scratch feed-forward network, its training and
//!   dataset generation.
//! * [`certify`]: sample-size bounds, offline verification, the online
//!   duality-gap check and the runtime estimator with backup fallback.
//! * [`stability`]: the LMI / contraction-rate checks and the error-bound audit.
//! * [`experiment`]: Monte-Carlo harness (ARMSE, timing, plot data).

pub mod approximator;
pub mod certify;
pub mod config;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mhe;
pub mod model;
pub mod qp;
pub mod stability;

pub use error::{Error, Result};
