//! Perturbation-aware distributionally robust reconstruction for linear
//! inverse problems.
//!
//! The crate estimates the dual objective of a Wasserstein-ball problem whose
//! adversary perturbs the measurement channel through a Gaussian family, and
//! minimizes it jointly over a linear reconstructor and the family parameter.

// `!(x > 0.0)` is used throughout on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dual;
pub mod error;
pub mod experiments;
pub mod inverse;
pub mod model;
pub mod optimizer;
pub mod ot;
pub mod perturbation;
pub mod rng;
pub mod validation;

pub use error::{Error, Result};
pub use model::{DualProblem, EmpiricalJoint, Reconstructor};
pub use perturbation::{AnisotropicGaussianFamily, IsotropicGaussianFamily, PerturbationFamily};
pub use rng::RngStream;
