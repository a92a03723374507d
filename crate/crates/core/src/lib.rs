//! Bilevel optimization for lower-level uniformly convex problems.
//!
//! The crate is organised around a [`problem::StochasticBilevelProblem`], a bundle of exact
//! and noisy derivative oracles. On top of it sit the implicit-differentiation
//! hypergradient and its Neumann-series estimator ([`hypergradient`]), the restarted
//! projected SGD used for the lower level ([`epoch_sgd`]), the UniBiO solver
//! ([`unibio`]), a few strongly-convex-lower-level comparators ([`baselines`]) and the
//! experiment harness ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod epoch_sgd;
pub mod error;
pub mod harness;
pub mod hypergradient;
pub mod problem;
pub mod trace;
pub mod unibio;

pub use error::{Error, Result};

/// Dense column vector used for every iterate and gradient.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used for cross derivatives and generalized Jacobians.
pub type Matrix = nalgebra::DMatrix<f64>;
