//! Lazy posterior-sampling control for smoothly parameterized systems.
//!
//! The library simulates average-cost Bayesian adaptive control with a
//! *lazy* resampling rule: the controller plans against a parameter drawn
//! from a conjugate posterior and keeps that plan until the determinant of
//! the information matrix has doubled since the last draw. Two concrete
//! system families are provided:
//!
//! - finite MDPs with Dirichlet posteriors over transition rows and an
//!   average-cost planner based on relative value iteration, and
//! - linear-Gaussian dynamics with column-wise Gaussian posteriors and a
//!   Riccati (LQ) planner, including the forcefully stabilized variant
//!   that hands control to a backup policy outside a safe region.
//!
//! [`harness`] runs seeded regret experiments (parallel across seeds when
//! the `parallel` feature is enabled), [`checks`] holds the property
//! suite behind the `validate` CLI command, and [`config`] defines the
//! JSON experiment format consumed by the CLI.

pub mod agent;
pub mod checks;
pub mod config;
pub mod env;
pub mod harness;
pub mod linalg;
pub mod planner;
pub mod posterior;

/// System parameter matrix Θ.
///
/// Tabular family: `n·d × n` with row `a·n + x` the next-state distribution
/// of the (0-based) pair `(x, a)`. Linear family: `(n+d) × n` with
/// `Θᵀ = (A, B)`.
pub type ParamMatrix = nalgebra::DMatrix<f64>;

pub use linalg::InfoMatrix;
