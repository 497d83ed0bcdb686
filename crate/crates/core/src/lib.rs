//! Stochastic linear-quadratic tracking with multiplicative noise.
//!
//! The crate solves the average-cost tracking problem for Itô systems
//! `dx = (Ax + Bu)dt + (Cx + Du)dw`, `y = Hx`, against references produced by
//! a marginally stable exosystem. Three routes are provided:
//!
//! - [`bpi`]: model-based bootstrap policy iteration. Phase I grows a shift
//!   parameter from a trivially stable shifted plant until the gain is
//!   stabilizing; phase II runs policy iteration on the true plant.
//! - [`learner`]: the same iteration driven purely by trajectory moments of a
//!   discounted plant (off-policy), plus a data-based feedforward solve.
//! - [`learner::learn_shadow`]: a variant for `D = 0` that restores the rank
//!   conditions with deterministic shadow systems instead of probing noise.
//!
//! Supporting modules: [`symquad`] (half-vectorization and Kronecker
//! utilities), [`model`] (plant data and the generalized Lyapunov operator),
//! [`solvers`] (Lyapunov, Riccati residual and Sylvester kernels), [`sim`]
//! (SDE/ODE integration and ensemble moments), [`regressors`] (data
//! matrices and rank diagnostics), and [`config`]/[`report`]/[`pipeline`] for
//! the experiment runner.

pub mod bpi;
pub mod config;
pub mod error;
pub mod learner;
pub(crate) mod linalg;
pub mod model;
pub mod pipeline;
pub mod regressors;
pub mod report;
pub mod sim;
pub mod solvers;
pub mod symquad;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
