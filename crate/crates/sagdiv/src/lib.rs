//! Nonparametric instrumental-variable regression by stochastic approximate
//! gradient descent in function space.
//!
//! The estimator minimizes the projected risk `E[loss(r(Z), P[h](Z))]` over a
//! sup-norm ball, where `r(z) = E[Y | Z = z]` and `P[h](z) = E[h(X) | Z = z]`.
//! Each descent step uses a single instrument draw and three preliminary
//! estimators fitted on an independent dataset:
//!
//! * a density-ratio model for the joint-over-marginals ratio of `(X, Z)`,
//!   fitted by unconstrained least-squares importance fitting;
//! * a kernel ridge regression of `Y` on `Z` for `r`;
//! * a conditional-expectation operator via kernel mean embeddings.
//!
//! The crate also ships classical baselines (two-stage least squares, kernel
//! instrumental-variable regression, a deliberately confounded kernel ridge),
//! synthetic benchmark scenarios with analytic and quadrature oracles, and a
//! thin CLI for running benchmarks, fitting models on CSV data, and
//! predicting from persisted models. See the `examples/` directory for one
//! runnable program per capability.

pub mod baselines;
pub mod benchmarks;
pub mod cli;
pub mod core;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod linalg;
pub mod rng;
pub mod sagd;

pub use crate::core::{Dataset, LearningRateSchedule, LossSpec, SearchSetSpec, StructuralModel};
pub use crate::error::{Error, Result};
