//! Online parameter estimation: set-membership hypercube updates and a
//! projected least-mean-squares point estimate.
//!
//! The set-membership step intersects the previous parameter hypercube with
//! the data-consistent slabs of a sliding window of transitions, then
//! re-centers to the tightest enclosing hypercube that is nested in the
//! previous one. The LMS step refines an interior point estimate used by
//! the controller's prediction model and projects it back onto the current
//! hypercube after every update.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConstraintSet, ParamAffineModel};
use crate::optkit::{lp_solve, LinearProgram, SolveStatus};
use crate::tol::MU_SAFETY;

/// Axis-aligned parameter hypercube `{theta : |theta - center|_inf <= radius}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypercubeSet {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl HypercubeSet {
    pub fn new(center: DVector<f64>, radius: f64) -> Self {
        assert!(radius >= 0.0, "hypercube radius must be nonnegative");
        Self { center, radius }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, theta: &DVector<f64>, tol: f64) -> bool {
        (theta - &self.center).amax() <= self.radius + tol
    }

    /// Componentwise projection onto the hypercube.
    pub fn clamp(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            theta[i].clamp(self.center[i] - self.radius, self.center[i] + self.radius)
        })
    }

    /// The `2^p` corner points.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let p = self.dim();
        (0..1usize << p)
            .map(|mask| {
                DVector::from_fn(p, |i, _| {
                    self.center[i] + if mask >> i & 1 == 1 { self.radius } else { -self.radius }
                })
            })
            .collect()
    }
}

/// One recorded state transition `(x, u) -> x_next`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

/// Estimator state: the hypercube, the interior point estimate, the
/// transition window, and the LMS step size.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub set: HypercubeSet,
    pub point: DVector<f64>,
    pub window: VecDeque<Transition>,
    pub mu: f64,
    /// Sliding-window length `M`; the deque keeps at most `M + 2` entries.
    pub window_len: usize,
}

/// Default sliding-window length.
pub const DEFAULT_WINDOW_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(
        "transition window is inconsistent with the parameter hypercube: \
         no parameter explains the recorded data within the disturbance bound"
    )]
    Inconsistent,
    #[error("parameter set update failed numerically: {0}")]
    Numerical(String),
}

impl EstimatorState {
    /// Fresh estimator with the point estimate at the hypercube center.
    pub fn new(set: HypercubeSet, mu: f64) -> Self {
        let point = set.center.clone();
        Self { set, point, window: VecDeque::new(), mu, window_len: DEFAULT_WINDOW_LEN }
    }

    pub fn with_point(mut self, point: DVector<f64>) -> Self {
        self.point = self.set.clamp(&point);
        self
    }
}

/// Half-space description of the parameters consistent with one transition:
/// rows `A theta <= b` with `A = [G; -G]` and slack given by the residual
/// plus the interval hull of `E * disturbance box`.
pub fn nonfalsified_rows(
    model: &ParamAffineModel,
    tr: &Transition,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = model.n;
    let p = model.p;
    let g = model.eval_g(&tr.x, &tr.u);
    let e = &tr.x_next - model.f.eval(&tr.x, &tr.u);
    // Componentwise reach of E d over the disturbance hypercube.
    let hull = DVector::from_fn(n, |i, _| {
        (0..model.q).map(|j| model.e[(i, j)].abs()).sum::<f64>() * model.dist_radius
    });
    let mut a = DMatrix::zeros(2 * n, p);
    a.view_mut((0, 0), (n, p)).copy_from(&g);
    a.view_mut((n, 0), (n, p)).copy_from(&(-&g));
    let mut b = DVector::zeros(2 * n);
    for i in 0..n {
        b[i] = e[i] + hull[i];
        b[n + i] = hull[i] - e[i];
    }
    (a, b)
}

/// Set-membership update: push the transition into the window, intersect
/// the previous hypercube with every window transition's consistency slab,
/// and re-center to the tightest nested hypercube.
///
/// The intersection bounds are found by `2p` linear programs. An infeasible
/// program means the data contradicts the model class within the modeled
/// disturbance; the error leaves the input state untouched.
pub fn sm_update(
    state: &EstimatorState,
    model: &ParamAffineModel,
    tr: Transition,
) -> Result<EstimatorState, EstimationError> {
    let p = model.p;
    let mut window = state.window.clone();
    window.push_back(tr);
    while window.len() > state.window_len + 2 {
        window.pop_front();
    }

    // Stack all window rows once.
    let rows_per = 2 * model.n;
    let m_rows = rows_per * window.len();
    let mut a = DMatrix::<f64>::zeros(m_rows, p);
    let mut b = DVector::<f64>::zeros(m_rows);
    for (k, tr) in window.iter().enumerate() {
        let (ak, bk) = nonfalsified_rows(model, tr);
        a.view_mut((k * rows_per, 0), (rows_per, p)).copy_from(&ak);
        b.rows_mut(k * rows_per, rows_per).copy_from(&bk);
    }
    let bounds: Vec<(f64, f64)> = (0..p)
        .map(|i| (state.set.center[i] - state.set.radius, state.set.center[i] + state.set.radius))
        .collect();

    let mut mins = DVector::<f64>::zeros(p);
    let mut maxs = DVector::<f64>::zeros(p);
    for i in 0..p {
        for dir in [1.0f64, -1.0] {
            let mut c = DVector::<f64>::zeros(p);
            c[i] = dir;
            let lp = LinearProgram {
                c,
                a_ineq: a.clone(),
                b_ineq: b.clone(),
                a_eq: DMatrix::zeros(0, p),
                b_eq: DVector::zeros(0),
                bounds: bounds.clone(),
            };
            let rep = lp_solve(&lp);
            match rep.status {
                SolveStatus::Optimal => {
                    if dir > 0.0 {
                        mins[i] = rep.solution[i];
                    } else {
                        maxs[i] = rep.solution[i];
                    }
                }
                SolveStatus::Infeasible => return Err(EstimationError::Inconsistent),
                other => {
                    return Err(EstimationError::Numerical(format!(
                        "bounding program ended with {other:?}"
                    )))
                }
            }
        }
    }

    // Tightest hypercube: radius from the widest coordinate range, capped
    // by the previous radius; center clamped so the new cube nests in the
    // old one.
    let mut eta = 0.0f64;
    for i in 0..p {
        eta = eta.max(0.5 * (maxs[i] - mins[i]));
    }
    let eta = eta.min(state.set.radius).max(0.0);
    let room = state.set.radius - eta;
    let center = DVector::from_fn(p, |i, _| {
        let mid = 0.5 * (mins[i] + maxs[i]);
        mid.clamp(state.set.center[i] - room, state.set.center[i] + room)
    });
    let set = HypercubeSet::new(center, eta);
    let point = set.clamp(&state.point);
    Ok(EstimatorState { set, point, window, mu: state.mu, window_len: state.window_len })
}

/// LMS gain rule `mu = 1 / (MU_SAFETY * max |G(x,u)|_2^2)`, with the
/// maximum taken over a lattice on the constraint box hint.
///
/// Returns the gain and a flag that is `true` when `G` vanishes on the whole
/// lattice (the gain then defaults to 1 and the caller should warn).
pub fn choose_mu(
    model: &ParamAffineModel,
    constraints: &ConstraintSet,
    grid_per_dim: usize,
) -> (f64, bool) {
    let bh = &constraints.box_hint;
    let steps = grid_per_dim.max(2);
    let lattice = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (steps - 1) as f64;
    let mut gmax = 0.0f64;
    // Joint lattice over (x, u), iterated odometer-style.
    let dims = model.n + model.m;
    let mut idx = vec![0usize; dims];
    loop {
        let x = DVector::from_fn(model.n, |i, _| lattice(bh.x_lo[i], bh.x_hi[i], idx[i]));
        let u = DVector::from_fn(model.m, |j, _| lattice(bh.u_lo[j], bh.u_hi[j], idx[model.n + j]));
        let g = model.eval_g(&x, &u);
        let spectral = g.svd(false, false).singular_values.max();
        gmax = gmax.max(spectral);
        let mut carry = true;
        for d in (0..dims).rev() {
            if carry {
                idx[d] += 1;
                if idx[d] >= steps {
                    idx[d] = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    if gmax <= 1e-300 {
        (1.0, true)
    } else {
        (1.0 / (MU_SAFETY * gmax * gmax), false)
    }
}

/// Projected LMS update of the point estimate using the latest transition,
/// clamped onto `new_set` (the hypercube produced by the set-membership
/// update for the same time step).
pub fn lms_update(
    state: &EstimatorState,
    model: &ParamAffineModel,
    x_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
    x_now: &DVector<f64>,
    new_set: &HypercubeSet,
) -> DVector<f64> {
    let pred = model.eval_f_theta(x_prev, u_prev, &state.point);
    let innovation = x_now - pred;
    let g = model.eval_g(x_prev, u_prev);
    let raw = &state.point + g.transpose() * innovation * state.mu;
    new_set.clamp(&raw)
}
