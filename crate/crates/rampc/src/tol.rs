//! Centralized numeric tolerances and safety factors.
//!
//! Every magic constant used by the solvers and the offline design pipeline
//! lives here with a rationale, so that the trade-off each one encodes is
//! auditable in one place and tests can reference the exact same values.

/// Feasibility tolerance for the dense simplex solver.
///
/// Phase-1 objectives below this value are treated as feasible. The solver
/// works on problems whose data is O(1)-scaled, so 1e-9 leaves three orders
/// of magnitude between genuine roundoff (~1e-12 after a few hundred pivots)
/// and the smallest constraint margins the design pipeline cares about
/// (~1e-6).
pub const LP_FEAS_TOL: f64 = 1e-9;

/// Pivot threshold for the simplex method: reduced costs and pivot elements
/// smaller than this in magnitude are treated as zero. Tighter than
/// [`LP_FEAS_TOL`] because it guards individual arithmetic decisions, not
/// accumulated sums.
pub const LP_PIVOT_TOL: f64 = 1e-11;

/// Convergence tolerance on the KKT residual of the active-set QP solver.
/// Dense KKT solves on well-scaled problems of dimension below ~200 achieve
/// residuals near machine precision; 1e-8 gives robust headroom.
pub const QP_TOL: f64 = 1e-8;

/// Relative Levenberg shift applied when the QP Hessian is not numerically
/// positive definite on the working-set null space: `H + lambda*I` with
/// `lambda = QP_LEVENBERG_REL * trace(H) / dim`.
pub const QP_LEVENBERG_REL: f64 = 1e-8;

/// Constraint-violation tolerance at which the SQP solver declares a point
/// feasible. The MPC constraint rows are scaled to O(1), so 1e-7 corresponds
/// to physical violations far below the disturbance floor.
pub const SQP_FEAS_TOL: f64 = 1e-7;

/// KKT stationarity tolerance for SQP convergence.
pub const SQP_OPT_TOL: f64 = 1e-6;

/// Iteration cap for the SQP solver. Cold starts on the hardest horizon-25
/// problems converge in well under 100 iterations; 200 leaves margin without
/// letting pathological instances spin.
pub const SQP_MAX_ITER: usize = 200;

/// Relative step for central finite differences, applied per coordinate as
/// `FD_STEP_REL * max(1, |value|)`. Central differences have O(h^2)
/// truncation error, and h = 1e-6 balances that against roundoff ~eps/h.
pub const FD_STEP_REL: f64 = 1e-6;

/// Multiplicative safety factor applied to every constant estimated as a
/// supremum over a finite grid (`rho`, Lipschitz slopes, constraint
/// tightening rates, gain caps). A 2% inflation covers the gap between the
/// grid supremum and the true supremum on the compact domains used here,
/// where the sampled functions have moderate curvature. Constants computed
/// exactly (eigenvalue bounds, vertex maxima of linear maps) are not
/// inflated.
pub const GRID_SAFETY: f64 = 1.02;

/// Points closer than this (in the metric of the denominator) to a ratio's
/// singularity are excluded from grid suprema to avoid 0/0 noise.
pub const GRID_EXCLUSION_RADIUS: f64 = 1e-8;

/// Safety factor in the LMS step-size rule `mu = 1 / (MU_SAFETY * max_grid
/// sigma_max(G)^2)`: keeps the step strictly inside the stability range even
/// if the grid slightly under-reads the true supremum.
pub const MU_SAFETY: f64 = 1.05;

/// Tolerance for the offline Jacobian-based contraction check. The measured
/// gap between the linearized (tangent) contraction factor and the sampled
/// secant ratios on the admissible lattice is ~2.9e-4 in the squared factor;
/// 5e-4 is twice that gap.
pub const CONTRACTION_CHECK_TOL: f64 = 5e-4;

/// Residual level below which a shifted candidate is accepted as feasible
/// for the successor problem (used for warm-start health reporting and for
/// feasibility fallbacks in region-of-attraction scans).
pub const CANDIDATE_RESIDUAL_TOL: f64 = 1e-6;

/// Equilibrium-verification tolerance: a steady state must be reproduced by
/// the dynamics at every parameter vertex to this absolute accuracy.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;

/// Tolerance used when re-checking the terminal synthesis inequalities at
/// the optimizer returned by the linear program.
pub const TERMINAL_RECHECK_TOL: f64 = 1e-9;

/// Weight on the terminal tube cap in the synthesis LP objective
/// (maximize gamma_eta0 + TERMINAL_LP_LAMBDA * s_bar_f_eta0).
pub const TERMINAL_LP_LAMBDA: f64 = 1.0;

/// Coefficients below this magnitude are treated as structurally zero when
/// dividing by tightening rates c_j.
pub const CJ_ZERO_TOL: f64 = 1e-12;

/// Default margin-inclusion tolerance for parameter-membership tests on
/// hypercubes (numerical containment, not a modeling quantity).
pub const SET_CONTAIN_TOL: f64 = 1e-12;
