//! Online robust adaptive controller: builds and solves the tube optimal
//! control problem, constructs the shifted warm-start candidate that
//! certifies recursive feasibility at runtime, and scans regions of
//! attraction.
//!
//! The decision vector is `z = (u_bar_0..u_bar_{N-1}, w_0..w_{N-1})`
//! (single shooting): the nominal trajectory, the point-estimate trajectory,
//! and the tube sizes are eliminated by forward recursion, so the problem
//! has only inequality constraints. Norm bounds are encoded in squared
//! smooth form so the SQP layer sees C¹ data throughout.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{DesignArtifact, TerminalIngredients};
use crate::estimation::EstimatorState;
use crate::model::{ConstraintSet, ParamAffineModel, StageCost, SystemSpec};
use crate::optkit::{sqp_solve, NlpProblem, SolveReport, SqpOptions};
use crate::tol::SQP_FEAS_TOL;
use crate::tube::{
    feature_gradients, l_theta, rho_at, w_tilde_delta, BoundVariant, TubeGeometry,
    UncertaintyBound,
};

/// Parameter-estimate snapshot consumed by one problem build: set center,
/// set radius, and the point estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSnapshot {
    pub theta_bar: DVector<f64>,
    pub eta: f64,
    pub theta_hat: DVector<f64>,
}

impl EstimatorSnapshot {
    pub fn from_state(est: &EstimatorState) -> Self {
        EstimatorSnapshot {
            theta_bar: est.set.center.clone(),
            eta: est.set.radius,
            theta_hat: est.point.clone(),
        }
    }
}

/// Which terminal ingredients the problem uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalChoice {
    /// Ball around a robust steady state.
    Simple,
    /// Enlarged control-Lyapunov level set with parameter-dependent level
    /// and tube cap.
    Alternative,
    /// Ellipsoid containment used by region-of-attraction scans.
    Roa,
}

/// Controller configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RampcConfig {
    /// Prediction horizon `N >= 1`.
    pub n_hor: usize,
    pub variant: BoundVariant,
    pub terminal: TerminalChoice,
    /// Cap on intermediate tube sizes `s_k`, `k = 1..N-1`; `None` uses the
    /// geometry's locality radius (no rows when that is infinite).
    pub s_bar: Option<f64>,
    /// Cap on the per-step disturbance bound `w_k`; `None` uses the
    /// terminal design's value (finite only for the enlarged terminal set).
    pub w_bar: Option<f64>,
    pub sqp: SqpOptions,
}

impl RampcConfig {
    pub fn new(n_hor: usize, variant: BoundVariant, terminal: TerminalChoice) -> Self {
        RampcConfig { n_hor, variant, terminal, s_bar: None, w_bar: None, sqp: SqpOptions::default() }
    }
}

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("configuration invalid: {0}")]
    Config(String),
    #[error("terminal ingredients not certified for this variant: {0}")]
    NotCertified(String),
    #[error("unsupported problem structure: {0}")]
    Unsupported(String),
}

/// Everything one problem instance needs, shared by the objective and
/// constraint closures.
struct ProblemCore {
    model: ParamAffineModel,
    constraints: ConstraintSet,
    cost: StageCost,
    geom: TubeGeometry,
    bound: UncertaintyBound,
    terminal: TerminalIngredients,
    cost_coeff: f64,
    n_hor: usize,
    theta_bar: DVector<f64>,
    theta_hat: DVector<f64>,
    eta: f64,
    rho: f64,
    l_theta: f64,
    x_t: DVector<f64>,
    /// Effective caps for this instance (`f64::INFINITY` = no rows).
    s_bar: f64,
    w_bar: f64,
    /// Representative disturbance-bound magnitude used purely for row
    /// scaling; any positive constant preserves the solution set.
    w_scale: f64,
    has_k: bool,
}

/// Forward rollout of one decision vector, optionally with sensitivities of
/// every eliminated quantity with respect to the decision vector.
pub struct Rollout {
    pub x_bar: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub u_bar: Vec<DVector<f64>>,
    pub u_hat: Vec<DVector<f64>>,
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    x_bar_s: Vec<DMatrix<f64>>,
    x_hat_s: Vec<DMatrix<f64>>,
    u_hat_s: Vec<DMatrix<f64>>,
    s_s: Vec<RowDVector<f64>>,
}

impl ProblemCore {
    fn dim(&self) -> usize {
        self.n_hor * (self.model.m + 1)
    }

    fn w_index(&self, k: usize) -> usize {
        self.n_hor * self.model.m + k
    }

    fn u_bar_at(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        let m = self.model.m;
        z.rows(k * m, m).into_owned()
    }

    fn rollout(&self, z: &DVector<f64>, with_sens: bool) -> Rollout {
        let n = self.model.n;
        let m = self.model.m;
        let nh = self.n_hor;
        let dim = self.dim();
        let mut out = Rollout {
            x_bar: Vec::with_capacity(nh + 1),
            x_hat: Vec::with_capacity(nh + 1),
            u_bar: Vec::with_capacity(nh),
            u_hat: Vec::with_capacity(nh),
            w: Vec::with_capacity(nh),
            s: Vec::with_capacity(nh + 1),
            x_bar_s: Vec::new(),
            x_hat_s: Vec::new(),
            u_hat_s: Vec::new(),
            s_s: Vec::new(),
        };
        out.x_bar.push(self.x_t.clone());
        out.x_hat.push(self.x_t.clone());
        out.s.push(0.0);
        if with_sens {
            out.x_bar_s.push(DMatrix::zeros(n, dim));
            out.x_hat_s.push(DMatrix::zeros(n, dim));
            out.s_s.push(RowDVector::zeros(dim));
        }
        for k in 0..nh {
            let ub = self.u_bar_at(z, k);
            let xb = out.x_bar[k].clone();
            let xh = out.x_hat[k].clone();
            let kmat = self.geom.k_at(&xb, &ub);
            let err = &xh - &xb;
            let uh = &ub + &kmat * &err;
            let wk = z[self.w_index(k)];
            let xb_next = self.model.eval_f_theta(&xb, &ub, &self.theta_bar);
            let xh_next = self.model.eval_f_theta(&xh, &uh, &self.theta_hat);
            let s_next = self.rho * out.s[k] + wk;

            if with_sens {
                let xb_s = &out.x_bar_s[k];
                let xh_s = &out.x_hat_s[k];
                // d(u_hat)/dz = U_k + K (Xhat - Xbar) + sum_l (K_l err) d(feat_l)/dz
                let mut uh_s = &kmat * (xh_s - xb_s);
                {
                    let mut blk = uh_s.view_mut((0, k * m), (m, m));
                    for i in 0..m {
                        blk[(i, i)] += 1.0;
                    }
                }
                if self.has_k {
                    let grads = feature_gradients(&xb, &ub);
                    for (l, (gv, gz)) in grads.iter().enumerate() {
                        let ke = &self.geom.k_coeffs[l] * &err;
                        if ke.amax() == 0.0 {
                            continue;
                        }
                        // feature gradient row: gz' Xbar + gv on the u-block
                        let mut df = gz.transpose() * xb_s;
                        {
                            let mut blk = df.view_mut((0, k * m), (1, m));
                            blk += gv.transpose();
                        }
                        uh_s += &ke * &df;
                    }
                }
                let (a_b, b_b) = self.model.jacobians(&xb, &ub, &self.theta_bar);
                let mut xb_s_next = &a_b * xb_s;
                {
                    let mut blk = xb_s_next.view_mut((0, k * m), (n, m));
                    blk += &b_b;
                }
                let (a_h, b_h) = self.model.jacobians(&xh, &uh, &self.theta_hat);
                let xh_s_next = &a_h * xh_s + &b_h * &uh_s;
                let mut s_s_next = &out.s_s[k] * self.rho;
                s_s_next[self.w_index(k)] += 1.0;
                out.x_bar_s.push(xb_s_next);
                out.x_hat_s.push(xh_s_next);
                out.u_hat_s.push(uh_s);
                out.s_s.push(s_s_next);
            }

            out.u_bar.push(ub);
            out.u_hat.push(uh);
            out.w.push(wk);
            out.x_bar.push(xb_next);
            out.x_hat.push(xh_next);
            out.s.push(s_next);
        }
        out
    }

    fn objective(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let ro = self.rollout(z, true);
        let dim = self.dim();
        let mut f = 0.0;
        let mut grad = RowDVector::zeros(dim);
        for k in 0..self.n_hor {
            let xh = &ro.x_hat[k];
            let uh = &ro.u_hat[k];
            f += self.cost.eval(xh, uh);
            grad += (xh.transpose() * &self.cost.q * 2.0) * &ro.x_hat_s[k];
            grad += (uh.transpose() * &self.cost.r * 2.0) * &ro.u_hat_s[k];
        }
        let xn = &ro.x_hat[self.n_hor];
        let (p_term, x_ref): (&DMatrix<f64>, Option<&DVector<f64>>) = match &self.terminal {
            TerminalIngredients::Simple(ts) => (&self.geom.p, Some(&ts.x_s)),
            TerminalIngredients::Alternative(ta) => (&ta.p_f, None),
            TerminalIngredients::Ellipsoid(te) => (&te.p_f, None),
        };
        let dx = match x_ref {
            Some(r) => xn - r,
            None => xn.clone(),
        };
        f += self.cost_coeff * (dx.transpose() * p_term * &dx)[(0, 0)];
        grad += (dx.transpose() * p_term * (2.0 * self.cost_coeff)) * &ro.x_hat_s[self.n_hor];
        (f, grad.transpose())
    }

    /// Number of squared tube rows per step for the active variant.
    fn tube_sq_rows(&self) -> usize {
        match self.bound.variant {
            BoundVariant::Vertex => self.bound.vertices.len(),
            BoundVariant::NormBall | BoundVariant::LipschitzBall => {
                match self.model.p {
                    1 => 1,
                    2 => 3,
                    _ => unreachable!("checked at construction"),
                }
            }
        }
    }

    fn n_rows(&self) -> usize {
        let nh = self.n_hor;
        let r = self.constraints.r();
        let mut rows = nh * r;
        rows += nh * (1 + self.tube_sq_rows());
        if self.s_bar.is_finite() && nh >= 2 {
            rows += nh - 1;
        }
        if self.w_bar.is_finite() {
            rows += nh;
        }
        rows + self.cfg_terminal_rows()
    }

    fn cfg_terminal_rows(&self) -> usize {
        match &self.terminal {
            TerminalIngredients::Simple(_) => 2,
            TerminalIngredients::Alternative(_) => 3,
            TerminalIngredients::Ellipsoid(_) => 2,
        }
    }

    fn constraints_eval(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let ro = self.rollout(z, true);
        let n = self.model.n;
        let m = self.model.m;
        let p = self.model.p;
        let nh = self.n_hor;
        let r = self.constraints.r();
        let dim = self.dim();
        let rows = self.n_rows();
        let mut g = DVector::zeros(rows);
        let mut jac = DMatrix::zeros(rows, dim);
        let mut row = 0usize;

        // Tightened pointwise constraints h_j + c_j s <= 0, k = 0..N-1.
        for k in 0..nh {
            let xb = &ro.x_bar[k];
            let ub = &ro.u_bar[k];
            let h = self.constraints.eval(xb, ub);
            let jx = self.constraints.h.jac_x(xb, ub);
            let ju = self.constraints.h.jac_u(xb, ub);
            let jx_s = &jx * &ro.x_bar_s[k]; // r x dim
            for j in 0..r {
                g[row] = h[j] + self.geom.c[j] * ro.s[k];
                let mut grow = jx_s.row(j).clone_owned();
                {
                    let mut blk = grow.view_mut((0, k * m), (1, m));
                    blk += ju.row(j);
                }
                grow += &ro.s_s[k] * self.geom.c[j];
                jac.row_mut(row).copy_from(&grow);
                row += 1;
            }
        }

        // Tube-bound rows: t_k = w_k - d_bar - L s_k >= 0 and the squared
        // parametric bound `|parametric|^2 <= t_k^2` per variant.
        let wsc = self.w_scale;
        for k in 0..nh {
            let xb = &ro.x_bar[k];
            let ub = &ro.u_bar[k];
            let t = ro.w[k] - self.bound.d_bar - self.l_theta * ro.s[k];
            let mut t_s = -(&ro.s_s[k] * self.l_theta);
            t_s[self.w_index(k)] += 1.0;

            g[row] = -t / wsc;
            jac.row_mut(row).copy_from(&(-&t_s / wsc));
            row += 1;

            let gmat = self.model.eval_g(xb, ub);
            match self.bound.variant {
                BoundVariant::Vertex => {
                    let eta2 = self.eta * self.eta;
                    for vert in &self.bound.vertices {
                        let gv = &gmat * vert;
                        let val = (gv.transpose() * &self.geom.p * &gv)[(0, 0)];
                        g[row] = (eta2 * val - t * t) / (wsc * wsc);
                        let (jgx, jgu) = self.model.g_theta_jacobians(xb, ub, vert);
                        // d|G vert|_P^2 = 2 (G vert)' P d(G vert)
                        let lead = gv.transpose() * &self.geom.p * 2.0;
                        let mut dval = &lead * (&jgx * &ro.x_bar_s[k]);
                        {
                            let contrib = &lead * &jgu; // 1 x m
                            let mut blk = dval.view_mut((0, k * m), (1, m));
                            blk += contrib;
                        }
                        let grow = (dval * eta2 - &t_s * (2.0 * t)) / (wsc * wsc);
                        jac.row_mut(row).copy_from(&grow);
                        row += 1;
                    }
                }
                BoundVariant::NormBall | BoundVariant::LipschitzBall => {
                    let nu = self.bound.c_b * self.eta;
                    let nu2 = nu * nu;
                    // M = G' P G (P = identity in the Lipschitz geometry).
                    let pg = &self.geom.p * &gmat;
                    let mmat = gmat.transpose() * &pg;
                    // Column sensitivities of G.
                    let mut dcols: Vec<DMatrix<f64>> = Vec::with_capacity(p);
                    for i in 0..p {
                        let jgx = self.model.g[i].jac_x(xb, ub);
                        let jgu = self.model.g[i].jac_u(xb, ub);
                        let mut d = &jgx * &ro.x_bar_s[k];
                        {
                            let mut blk = d.view_mut((0, k * m), (n, m));
                            blk += &jgu;
                        }
                        dcols.push(d);
                    }
                    let dm = |a: usize, b: usize| -> RowDVector<f64> {
                        let pa = pg.column(a).transpose(); // 1 x n (P g_a)'
                        let pb = pg.column(b).transpose();
                        &pa * &dcols[b] + &pb * &dcols[a]
                    };
                    if p == 1 {
                        g[row] = (nu2 * mmat[(0, 0)] - t * t) / (wsc * wsc);
                        let grow = (dm(0, 0) * nu2 - &t_s * (2.0 * t)) / (wsc * wsc);
                        jac.row_mut(row).copy_from(&grow);
                        row += 1;
                    } else {
                        // lambda_max(nu^2 M) <= t^2 for a 2x2 symmetric M:
                        // both diagonal gaps nonnegative and the determinant
                        // of t^2 I - nu^2 M nonnegative.
                        let m11 = mmat[(0, 0)];
                        let m22 = mmat[(1, 1)];
                        let m12 = mmat[(0, 1)];
                        let dm11 = dm(0, 0);
                        let dm22 = dm(1, 1);
                        let dm12 = dm(0, 1);
                        let w2 = wsc * wsc;
                        let w4 = w2 * w2;
                        g[row] = (nu2 * m11 - t * t) / w2;
                        jac.row_mut(row).copy_from(&((&dm11 * nu2 - &t_s * (2.0 * t)) / w2));
                        row += 1;
                        g[row] = (nu2 * m22 - t * t) / w2;
                        jac.row_mut(row).copy_from(&((&dm22 * nu2 - &t_s * (2.0 * t)) / w2));
                        row += 1;
                        let q1 = t * t - nu2 * m11;
                        let q2 = t * t - nu2 * m22;
                        g[row] = (nu2 * nu2 * m12 * m12 - q1 * q2) / w4;
                        let dq1 = &t_s * (2.0 * t) - &dm11 * nu2;
                        let dq2 = &t_s * (2.0 * t) - &dm22 * nu2;
                        let grow =
                            (dm12 * (2.0 * nu2 * nu2 * m12) - (&dq1 * q2 + &dq2 * q1)) / w4;
                        jac.row_mut(row).copy_from(&grow);
                        row += 1;
                    }
                }
            }
        }

        // Intermediate tube caps s_k <= s_bar, k = 1..N-1.
        if self.s_bar.is_finite() && nh >= 2 {
            for k in 1..nh {
                g[row] = (ro.s[k] - self.s_bar) / self.s_bar;
                jac.row_mut(row).copy_from(&(&ro.s_s[k] / self.s_bar));
                row += 1;
            }
        }

        // Disturbance caps w_k <= w_bar.
        if self.w_bar.is_finite() {
            for k in 0..nh {
                g[row] = (ro.w[k] - self.w_bar) / self.w_bar;
                let mut grow = RowDVector::zeros(dim);
                grow[self.w_index(k)] = 1.0 / self.w_bar;
                jac.row_mut(row).copy_from(&grow);
                row += 1;
            }
        }

        // Terminal constraint.
        let xn = &ro.x_bar[nh];
        let xn_s = &ro.x_bar_s[nh];
        let sn = ro.s[nh];
        let sn_s = &ro.s_s[nh];
        match &self.terminal {
            TerminalIngredients::Simple(ts) => {
                // V_delta(xbar_N, x_s) + s_N <= c_xs, split into the sign row
                // c_xs - s_N >= 0 and the squared containment.
                let c = ts.c_xs;
                g[row] = (sn - c) / c;
                jac.row_mut(row).copy_from(&(sn_s / c));
                row += 1;
                let dx = xn - &ts.x_s;
                let v2 = (dx.transpose() * &self.geom.p * &dx)[(0, 0)];
                let gap = c - sn;
                g[row] = (v2 - gap * gap) / (c * c);
                let grow =
                    ((dx.transpose() * &self.geom.p * 2.0) * xn_s + sn_s * (2.0 * gap)) / (c * c);
                jac.row_mut(row).copy_from(&grow);
                row += 1;
            }
            TerminalIngredients::Alternative(ta) => {
                let sf = ta.s_bar_f_eta(self.eta);
                let gam = ta.gamma_eta(self.eta);
                let sc = self.geom.delta_loc;
                g[row] = -sn / sc;
                jac.row_mut(row).copy_from(&(-(sn_s / sc)));
                row += 1;
                g[row] = (sn - sf) / sc;
                jac.row_mut(row).copy_from(&(sn_s / sc));
                row += 1;
                let v2 = (xn.transpose() * &ta.p_f * xn)[(0, 0)];
                let gsc = ta.gamma_bar * ta.gamma_bar;
                g[row] = (v2 - gam * gam) / gsc;
                jac.row_mut(row).copy_from(&((xn.transpose() * &ta.p_f * 2.0) * xn_s / gsc));
                row += 1;
            }
            TerminalIngredients::Ellipsoid(te) => {
                // |xbar_N|_Pf + c_f s_N <= gamma.
                let gap = te.gamma - te.c_f * sn;
                g[row] = -gap / te.gamma;
                jac.row_mut(row).copy_from(&(sn_s * (te.c_f / te.gamma)));
                row += 1;
                let v2 = (xn.transpose() * &te.p_f * xn)[(0, 0)];
                let gsc = te.gamma * te.gamma;
                g[row] = (v2 - gap * gap) / gsc;
                let grow = ((xn.transpose() * &te.p_f * 2.0) * xn_s
                    + sn_s * (2.0 * gap * te.c_f))
                    / gsc;
                jac.row_mut(row).copy_from(&grow);
                row += 1;
            }
        }
        debug_assert_eq!(row, rows);
        (g, jac)
    }
}

/// One solved instance: inputs, tube sizes, both rolled-out trajectories,
/// residuals, and the solver report.
#[derive(Debug, Clone)]
pub struct RampcSolution {
    pub u_bar: Vec<DVector<f64>>,
    pub w: Vec<f64>,
    pub x_bar: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub u_hat: Vec<DVector<f64>>,
    pub s: Vec<f64>,
    pub objective: f64,
    /// Scaled constraint values (positive = violated).
    pub residuals: DVector<f64>,
    pub max_residual: f64,
    pub report: SolveReport,
    pub z: DVector<f64>,
    /// The estimate snapshot the problem was built with.
    pub snapshot: EstimatorSnapshot,
}

impl RampcSolution {
    /// All constraints hold to the solver feasibility tolerance.
    pub fn feasible(&self, tol: f64) -> bool {
        self.max_residual <= tol
    }

    /// The control input to apply.
    pub fn u_apply(&self) -> DVector<f64> {
        self.u_bar[0].clone()
    }
}

/// Candidate decision vector produced by the one-step shift, plus its
/// feasibility report in the new problem.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub z: DVector<f64>,
    pub residuals: DVector<f64>,
    pub max_residual: f64,
    /// `s*_1 - V_delta(x_new, x_bar*_1)`: nonnegative when the measured
    /// state stayed inside the predicted tube cross-section.
    pub nestedness_slack: f64,
}

/// The online controller: immutable problem data plus configuration.
#[derive(Debug, Clone)]
pub struct RampcController {
    pub model: ParamAffineModel,
    pub constraints: ConstraintSet,
    pub cost: StageCost,
    pub geom: TubeGeometry,
    pub bound: UncertaintyBound,
    pub terminal: TerminalIngredients,
    pub cost_coeff: f64,
    /// Initial parameter-set radius (fixes the contraction-rate update law).
    pub eta0: f64,
    pub cfg: RampcConfig,
    w_scale: f64,
}

impl RampcController {
    /// Assembles a controller from the offline design artifact.
    pub fn from_artifact(
        spec: &SystemSpec,
        artifact: &DesignArtifact,
        cfg: RampcConfig,
    ) -> Result<Self, MpcError> {
        if cfg.n_hor == 0 {
            return Err(MpcError::Config("horizon must be at least 1".into()));
        }
        let geom = artifact.geometry.get(cfg.variant).clone();
        let bound = artifact.bounds.get(cfg.variant).clone();
        if matches!(bound.variant, BoundVariant::NormBall | BoundVariant::LipschitzBall)
            && spec.model.p > 2
        {
            return Err(MpcError::Unsupported(
                "smooth eigenvalue rows cover at most two parameters".into(),
            ));
        }
        if let Some(sb) = cfg.s_bar {
            if sb.is_finite() && sb > geom.delta_loc {
                return Err(MpcError::Config(format!(
                    "s_bar {sb} exceeds the locality radius {}",
                    geom.delta_loc
                )));
            }
        }
        let (terminal, cost_coeff) = match cfg.terminal {
            TerminalChoice::Simple => {
                let ts = artifact
                    .terminal_simple
                    .get(cfg.variant)
                    .ok
                    .as_ref()
                    .ok_or_else(|| MpcError::NotCertified("steady-state terminal".into()))?;
                (TerminalIngredients::Simple(ts.clone()), ts.cost_coeff)
            }
            TerminalChoice::Alternative => {
                let ta = artifact
                    .terminal_alternative
                    .get(cfg.variant)
                    .ok
                    .as_ref()
                    .ok_or_else(|| MpcError::NotCertified("enlarged terminal set".into()))?;
                (TerminalIngredients::Alternative(ta.clone()), ta.cost_coeff)
            }
            TerminalChoice::Roa => {
                let te = artifact
                    .roa_terminal
                    .as_ref()
                    .map(|pv| pv.get(cfg.variant).clone())
                    .ok_or_else(|| MpcError::NotCertified("containment terminal".into()))?;
                // The scan only tests feasibility; a unit terminal weight
                // keeps the objective well-posed.
                (TerminalIngredients::Ellipsoid(te), 1.0)
            }
        };
        let eta0 = spec.theta_set0.radius;
        let w_scale = {
            let bh = &spec.constraints.box_hint;
            let n = spec.model.n;
            let u_mid = DVector::from_fn(spec.model.m, |j, _| 0.5 * (bh.u_lo[j] + bh.u_hi[j]));
            let mut worst = 0.0f64;
            for mask in 0..1usize << n {
                let x = DVector::from_fn(n, |i, _| {
                    if mask >> i & 1 == 1 {
                        bh.x_hi[i]
                    } else {
                        bh.x_lo[i]
                    }
                });
                worst = worst
                    .max(crate::tube::w_tilde(&bound, &geom, &spec.model, eta0, &x, &u_mid, true));
            }
            if worst > 0.0 {
                worst
            } else {
                1.0
            }
        };
        Ok(RampcController {
            model: spec.model.clone(),
            constraints: spec.constraints.clone(),
            cost: spec.cost.clone(),
            geom,
            bound,
            terminal,
            cost_coeff,
            eta0,
            cfg,
            w_scale,
        })
    }

    fn core(&self, snap: &EstimatorSnapshot, x_t: &DVector<f64>) -> Arc<ProblemCore> {
        let s_bar = self.cfg.s_bar.unwrap_or(self.geom.delta_loc);
        let w_bar = self.cfg.w_bar.unwrap_or(match &self.terminal {
            TerminalIngredients::Alternative(ta) => ta.w_cap(self.bound.d_bar, snap.eta),
            _ => f64::INFINITY,
        });
        Arc::new(ProblemCore {
            model: self.model.clone(),
            constraints: self.constraints.clone(),
            cost: self.cost.clone(),
            geom: self.geom.clone(),
            bound: self.bound.clone(),
            terminal: self.terminal.clone(),
            cost_coeff: self.cost_coeff,
            n_hor: self.cfg.n_hor,
            theta_bar: snap.theta_bar.clone(),
            theta_hat: snap.theta_hat.clone(),
            eta: snap.eta,
            rho: rho_at(&self.geom, snap.eta, self.eta0),
            l_theta: l_theta(&self.bound, &self.geom, snap.eta),
            x_t: x_t.clone(),
            s_bar,
            w_bar,
            w_scale: self.w_scale,
            has_k: !self.geom.k_coeffs.is_empty(),
        })
    }

    /// Assembles the optimization problem for one time step. The initial
    /// iterate is the default warm start (zero inputs clipped into bounds,
    /// disturbance bounds evaluated along the resulting rollout).
    pub fn build_problem(&self, snap: &EstimatorSnapshot, x_t: &DVector<f64>) -> NlpProblem {
        let core = self.core(snap, x_t);
        self.problem_from_core(core.clone(), self.default_warm_core(&core))
    }

    fn problem_from_core(&self, core: Arc<ProblemCore>, x0: DVector<f64>) -> NlpProblem {
        let rows = core.n_rows();
        let c_obj = core.clone();
        let c_con = core.clone();
        NlpProblem {
            dim: core.dim(),
            objective: Box::new(move |z| c_obj.objective(z)),
            constraints: Box::new(move |z| c_con.constraints_eval(z)),
            is_eq: vec![false; rows],
            x0,
        }
    }

    fn default_warm_core(&self, core: &ProblemCore) -> DVector<f64> {
        let nh = self.cfg.n_hor;
        let m = self.model.m;
        let bh = &self.constraints.box_hint;
        let mut z = DVector::zeros(core.dim());
        let u0 = DVector::from_fn(m, |j, _| 0.0f64.clamp(bh.u_lo[j], bh.u_hi[j]));
        for k in 0..nh {
            z.rows_mut(k * m, m).copy_from(&u0);
        }
        // Binding disturbance bounds along the zero-input rollout.
        let mut x = core.x_t.clone();
        let mut s = 0.0;
        for k in 0..nh {
            let w = w_tilde_delta(&self.bound, &self.geom, &self.model, core.eta, &x, &u0, s, true);
            z[core.w_index(k)] = w;
            x = self.model.eval_f_theta(&x, &u0, &core.theta_bar);
            s = core.rho * s + w;
        }
        z
    }

    /// Default warm start exposed for experiment drivers.
    pub fn default_warm(&self, snap: &EstimatorSnapshot, x_t: &DVector<f64>) -> DVector<f64> {
        self.default_warm_core(&self.core(snap, x_t))
    }

    /// Solves the tube optimal control problem at the measured state.
    pub fn solve(
        &self,
        snap: &EstimatorSnapshot,
        x_t: &DVector<f64>,
        warm: Option<&DVector<f64>>,
    ) -> RampcSolution {
        let core = self.core(snap, x_t);
        let x0 = match warm {
            Some(z) => {
                debug_assert_eq!(z.len(), core.dim());
                z.clone()
            }
            None => self.default_warm_core(&core),
        };
        let problem = self.problem_from_core(core.clone(), x0);
        let report = sqp_solve(&problem, &self.cfg.sqp);
        self.solution_from_z(&core, report, snap)
    }

    fn solution_from_z(
        &self,
        core: &ProblemCore,
        report: SolveReport,
        snap: &EstimatorSnapshot,
    ) -> RampcSolution {
        let z = report.solution.clone();
        let ro = core.rollout(&z, false);
        let (g, _) = core.constraints_eval(&z);
        let (obj, _) = core.objective(&z);
        RampcSolution {
            u_bar: ro.u_bar,
            w: ro.w,
            x_bar: ro.x_bar,
            x_hat: ro.x_hat,
            u_hat: ro.u_hat,
            s: ro.s,
            objective: obj,
            max_residual: g.max(),
            residuals: g,
            report,
            z,
            snapshot: snap.clone(),
        }
    }

    /// Rollout of an arbitrary decision vector under a snapshot (testing
    /// and diagnostics).
    pub fn rollout(
        &self,
        snap: &EstimatorSnapshot,
        x_t: &DVector<f64>,
        z: &DVector<f64>,
    ) -> Rollout {
        self.core(snap, x_t).rollout(z, false)
    }

    /// Scaled constraint residuals of an arbitrary decision vector.
    pub fn residuals(
        &self,
        snap: &EstimatorSnapshot,
        x_t: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        self.core(snap, x_t).constraints_eval(z).0
    }

    /// The terminal control law (used to extend candidate trajectories).
    pub fn terminal_control(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.terminal {
            TerminalIngredients::Simple(ts) => &ts.u_s + &ts.k_local * (x - &ts.x_s),
            TerminalIngredients::Alternative(ta) => &ta.k_f * x,
            TerminalIngredients::Ellipsoid(te) => &te.k_f * x,
        }
    }

    /// One-step shifted candidate: extends the previous optimal nominal
    /// trajectory with the terminal controller under the previous
    /// parameters, re-rolls the tube-feedback candidate from the new
    /// measured state under the new parameters, and sets each disturbance
    /// variable to its binding bound. The report carries the candidate's
    /// residuals in the new problem.
    pub fn candidate_shift(
        &self,
        prev: &RampcSolution,
        snap_new: &EstimatorSnapshot,
        x_new: &DVector<f64>,
    ) -> Candidate {
        let nh = self.cfg.n_hor;
        let m = self.model.m;
        debug_assert_eq!(prev.u_bar.len(), nh);

        // Extend the previous solution one step with the terminal
        // controller under the previous parameter-set center.
        let x_end = &prev.x_bar[nh];
        let u_end = self.terminal_control(x_end);
        let mut ub_ext: Vec<DVector<f64>> = prev.u_bar.clone();
        ub_ext.push(u_end);
        let xb_ext: Vec<DVector<f64>> = prev.x_bar.clone();

        // Tube-feedback candidate rolled under the new center.
        let core = self.core(snap_new, x_new);
        let mut z = DVector::zeros(core.dim());
        let mut x = x_new.clone();
        let mut s = 0.0f64;
        for k in 0..nh {
            let z_ref = &xb_ext[k + 1];
            let v_ref = &ub_ext[k + 1];
            let u = self.geom.kappa(&x, z_ref, v_ref);
            let w = w_tilde_delta(
                &self.bound,
                &self.geom,
                &self.model,
                snap_new.eta,
                &x,
                &u,
                s,
                true,
            );
            z.rows_mut(k * m, m).copy_from(&u);
            z[core.w_index(k)] = w;
            x = self.model.eval_f_theta(&x, &u, &snap_new.theta_bar);
            s = core.rho * s + w;
        }
        let (g, _) = core.constraints_eval(&z);
        let nestedness_slack = prev.s[1] - self.geom.v_delta(x_new, &prev.x_bar[1]);
        Candidate { z, max_residual: g.max(), residuals: g, nestedness_slack }
    }

    /// Extends a feasible decision vector from the current horizon to a
    /// longer one by appending terminal-controller steps (binding
    /// disturbance bounds on the appended part).
    pub fn extend_decision(
        &self,
        snap: &EstimatorSnapshot,
        x_t: &DVector<f64>,
        z: &DVector<f64>,
        n_from: usize,
        n_to: usize,
    ) -> DVector<f64> {
        debug_assert!(n_to >= n_from);
        let m = self.model.m;
        let rho = rho_at(&self.geom, snap.eta, self.eta0);
        let mut x_bar = x_t.clone();
        let mut out = DVector::zeros(n_to * (m + 1));
        let mut s = 0.0f64;
        for k in 0..n_to {
            let u = if k < n_from {
                z.rows(k * m, m).into_owned()
            } else {
                self.terminal_control(&x_bar)
            };
            let w = if k < n_from {
                z[n_from * m + k]
            } else {
                w_tilde_delta(&self.bound, &self.geom, &self.model, snap.eta, &x_bar, &u, s, true)
            };
            out.rows_mut(k * m, m).copy_from(&u);
            out[n_to * m + k] = w;
            x_bar = self.model.eval_f_theta(&x_bar, &u, &snap.theta_bar);
            s = rho * s + w;
        }
        out
    }

    /// Controller with the same data at a different horizon.
    pub fn with_horizon(&self, n_hor: usize) -> Self {
        let mut c = self.clone();
        c.cfg.n_hor = n_hor;
        c
    }
}

/// Feasibility mask over a state grid plus the feasible percentage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoaScan {
    pub feasible: Vec<bool>,
    pub percentage: f64,
}

/// Attempts one solve per grid state and records feasibility. Grid points
/// are distributed across workers and merged by index, so the result is
/// deterministic.
pub fn roa_scan(
    ctrl: &RampcController,
    snap: &EstimatorSnapshot,
    grid: &[DVector<f64>],
) -> RoaScan {
    let tol = ctrl.cfg.sqp.feas_tol.max(SQP_FEAS_TOL);
    let feasible: Vec<bool> = grid
        .par_iter()
        .map(|x0| {
            let sol = ctrl.solve(snap, x0, None);
            sol.feasible(tol)
        })
        .collect();
    let count = feasible.iter().filter(|&&b| b).count();
    let percentage = 100.0 * count as f64 / feasible.len().max(1) as f64;
    RoaScan { feasible, percentage }
}

/// Region-of-attraction scan over several horizons, ascending. Each grid
/// point's solution at one horizon is extended by the terminal controller
/// to warm-start the next; a point also counts as feasible when the
/// extended candidate already satisfies every constraint (feasibility is
/// inherited along the chain even if the solver stalls).
pub fn roa_scan_chain(
    ctrl: &RampcController,
    horizons: &[usize],
    snap: &EstimatorSnapshot,
    grid: &[DVector<f64>],
) -> Vec<RoaScan> {
    assert!(horizons.windows(2).all(|w| w[0] < w[1]), "horizons must be ascending");
    let tol = ctrl.cfg.sqp.feas_tol.max(SQP_FEAS_TOL);
    let per_point: Vec<Vec<bool>> = grid
        .par_iter()
        .map(|x0| {
            let mut flags = Vec::with_capacity(horizons.len());
            let mut carry: Option<(usize, DVector<f64>)> = None;
            for &nh in horizons {
                let c = ctrl.with_horizon(nh);
                let warm = carry
                    .as_ref()
                    .map(|(n_from, z)| c.extend_decision(snap, x0, z, *n_from, nh));
                let warm_ok = warm
                    .as_ref()
                    .map(|z| c.residuals(snap, x0, z).max() <= tol)
                    .unwrap_or(false);
                let sol = c.solve(snap, x0, warm.as_ref());
                let solved = sol.feasible(tol);
                flags.push(solved || warm_ok);
                carry = if solved {
                    Some((nh, sol.z))
                } else if warm_ok {
                    warm.map(|z| (nh, z))
                } else {
                    None
                };
            }
            flags
        })
        .collect();
    (0..horizons.len())
        .map(|i| {
            let feasible: Vec<bool> = per_point.iter().map(|f| f[i]).collect();
            let count = feasible.iter().filter(|&&b| b).count();
            let percentage = 100.0 * count as f64 / feasible.len().max(1) as f64;
            RoaScan { feasible, percentage }
        })
        .collect()
}

/// Evenly spaced grid over the state box (`points` per axis), row-major
/// over dimensions; the fixed ordering makes scans reproducible.
pub fn state_grid(bh: &crate::model::BoxHint, points: usize) -> Vec<DVector<f64>> {
    let n = bh.x_lo.len();
    let axis = |i: usize| -> Vec<f64> {
        (0..points)
            .map(|k| bh.x_lo[i] + (bh.x_hi[i] - bh.x_lo[i]) * k as f64 / (points - 1).max(1) as f64)
            .collect()
    };
    let axes: Vec<Vec<f64>> = (0..n).map(axis).collect();
    let mut out = Vec::with_capacity(points.pow(n as u32));
    let mut idx = vec![0usize; n];
    loop {
        out.push(DVector::from_fn(n, |i, _| axes[i][idx[i]]));
        let mut d = n;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < points {
                break;
            }
            idx[d] = 0;
        }
    }
}

