//! Robust multi-rate MPC with multi-step predictors and homothetic tubes.
//!
//! The crate covers the full toolchain:
//!
//! * [`geometry`] — polytope and box primitives (support values, vertex
//!   enumeration of low-complexity shapes, RPI box approximation);
//! * [`model`] — ground-truth plant, exact ZOH discretization and p-step
//!   lifting, trajectory simulation;
//! * [`identify`] — set-membership identification of multi-step predictors
//!   (residual-bound LPs, feasible-parameter boxes, nominal parameters);
//! * [`design`] — offline synthesis of the tube feedback `K`, diagonal
//!   terminal cost `P`, tube shape, terminal scaling and tightenings;
//! * [`mpc`] — the online homothetic-tube QP: constraint assembly, solving,
//!   and tube-containment verification;
//! * [`baselines`] — rigid-tube multi-rate MPC and one-step homothetic tube
//!   controllers plus the complexity reporter;
//! * [`cli`] — experiment orchestration, artifact serialization, CSV traces.

pub mod baselines;
pub mod cli;
pub mod design;
pub mod error;
pub mod geometry;
pub mod identify;
pub mod model;
pub mod mpc;
pub mod solve;

pub use error::{Error, Result};
