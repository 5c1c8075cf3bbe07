//! Kernelized additive principal components.
//!
//! Given `p` variables observed on the same `n` units, the smallest additive
//! principal component is a set of transforms `phi_1..phi_p` (one per variable,
//! each living in a reproducing kernel Hilbert space) minimizing the penalized
//! variance of their sum,
//!
//! ```text
//! Var(sum phi_j) + sum alpha_j ||phi_j||^2
//! ```
//!
//! subject to `sum Var(phi_j) + sum alpha_j ||phi_j||^2 = 1`. A small value
//! signals an approximate additive relation (a concurvity) `sum phi_j ~ 0`.
//!
//! The crate provides the kernels and centered Gram matrices ([`kernels`],
//! [`gram`]), the penalized-regression smoother the iterative solver is built
//! from ([`smoother`]), the iterative power solver with deflation
//! ([`power`]), a direct eigensolver and an exact reduced-space oracle
//! ([`direct`]), penalty selection ([`model_selection`]), a fitted-model
//! document ([`model`]) and a simulation with known answer ([`simulation`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod direct;
pub mod error;
pub mod gram;
pub mod kernels;
pub mod model;
pub mod model_selection;
pub mod power;
pub mod simulation;
pub mod smoother;

pub use error::{ApcError, Result};
pub use kernels::KernelSpec;
