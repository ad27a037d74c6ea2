//! Hypergradients for nested multilevel optimization via implicit
//! differentiation.
//!
//! The library models problems where each level minimizes its own objective
//! given all shallower decisions, and computes the total derivative of the top
//! objective with respect to the top variable by differentiating the lower
//! levels' stationarity conditions instead of unrolling their solvers.
//!
//! Layout:
//! - [`model`]: problems, derivative oracles, stacked points.
//! - [`numderiv`]: central finite differences (independent reference oracle).
//! - [`linsolve`]: SPD solves, direct and truncated conjugate gradient.
//! - [`trilevel`]: closed-form three-level Jacobians and hypergradient.
//! - [`nlevel`]: recursive Jacobian table and hypergradient for any depth.
//! - [`optim`]: outer/inner solver loops, Adam, trace records, bound checks.
//! - [`baselines`]: value-gradient and finite-difference hypergradients.
//! - [`experiments`]: benchmark problem builders, data ingestion, metrics.
//! - [`synthetic`]: seeded quadratic families with exact reductions.
//! - [`verify`]: runnable invariant suites shared by the CLI and tests.

pub mod baselines;
pub mod error;
pub mod experiments;
pub mod linsolve;
pub mod model;
pub mod nlevel;
pub mod numderiv;
pub mod optim;
pub mod synthetic;
pub mod trilevel;
pub mod verify;

pub use error::{Error, Result};
