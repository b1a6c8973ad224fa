//! Robust adaptive model predictive control for parameter-affine nonlinear
//! systems.
//!
//! The crate is organized as a pipeline:
//!
//! * [`model`] — parameter-affine plant families, constraints, and costs;
//! * [`optkit`] — dense LP/QP/SQP solvers used by every other layer;
//! * [`estimation`] — set-membership and least-mean-squares parameter
//!   estimators;
//! * [`tube`] — incremental-Lyapunov tube arithmetic and the interchangeable
//!   uncertainty over-approximations;
//! * [`design`] — offline measurement of contraction/tightening constants
//!   and terminal-ingredient synthesis;
//! * [`rampc`] — the online robust adaptive controller;
//! * [`sim`] — closed-loop simulation, experiment drivers, and trace output.
//!
//! Numerical tolerances live in [`tol`], each with a rationale.

pub mod design;
pub mod estimation;
pub mod model;
pub mod optkit;
pub mod rampc;
pub mod sim;
pub mod tol;
pub mod tube;
