//! Self-contained dense optimization toolkit: linear programming (two-phase
//! simplex), convex quadratic programming (primal active set), and smooth
//! nonlinear programming (line-search SQP with an l1 exact-penalty merit
//! function).
//!
//! The toolkit targets the small, dense, well-scaled problems produced by
//! the tube MPC stack: tens of variables, low hundreds of constraints. All
//! pivoting and tie-breaking rules are deterministic, so repeated solves of
//! the same data reproduce bit-identical iterates.

mod lp;
mod qp;
mod sqp;

pub use lp::{lp_solve, LinearProgram};
pub use qp::{qp_solve, qp_solve_with_duals, QuadraticProgram};
pub use sqp::{sqp_solve, NlpProblem, SqpOptions};

use nalgebra::DVector;

/// Termination status of any toolkit solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Converged to the requested tolerances.
    Optimal,
    /// The constraint set was certified empty (LP/QP) or the solver
    /// converged to a stationary point of the constraint violation with
    /// positive infeasibility (SQP).
    Infeasible,
    /// The objective decreases without bound on the feasible set.
    Unbounded,
    /// Iteration cap reached before the tolerances were met.
    IterationLimit,
    /// A linear-algebra or line-search breakdown that retries could not fix.
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_optimal(self) -> bool {
        matches!(self, SolveStatus::Optimal)
    }
}

/// Uniform solver result: final point plus the residuals needed to audit it.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Final point; for non-optimal SQP statuses this is the best feasible
    /// point encountered, if any, otherwise the last iterate.
    pub solution: DVector<f64>,
    pub objective: f64,
    /// Maximum constraint violation at `solution` (0 for unconstrained).
    pub max_violation: f64,
    /// Stationarity residual at `solution`.
    pub kkt_residual: f64,
    pub iterations: usize,
}
