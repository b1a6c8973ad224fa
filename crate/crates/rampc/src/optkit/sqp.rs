//! Line-search SQP with an l1 exact-penalty merit function, damped BFGS
//! Hessian updates, and an elastic-mode fallback for infeasible QP
//! linearizations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{qp_solve_with_duals, QuadraticProgram, SolveReport, SolveStatus};
use crate::tol::{FD_STEP_REL, SQP_FEAS_TOL, SQP_MAX_ITER, SQP_OPT_TOL};

/// A smooth nonlinear program
/// `min f(x)` s.t. `c_i(x) = 0` (rows tagged equality) and `c_i(x) <= 0`
/// (the rest).
///
/// Both callbacks must return finite values at the initial point; the
/// constraint callback returns the stacked constraint values and their
/// Jacobian in one call because the solver always needs both.
pub struct NlpProblem {
    pub dim: usize,
    /// Objective value and gradient.
    pub objective: Box<dyn Fn(&DVector<f64>) -> (f64, DVector<f64>) + Send + Sync>,
    /// Stacked constraint values (length `n_con`) and Jacobian
    /// (`n_con x dim`).
    pub constraints: Box<dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + Send + Sync>,
    /// `true` marks an equality row; `false` an inequality row `c_i <= 0`.
    pub is_eq: Vec<bool>,
    pub x0: DVector<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SqpOptions {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_iter: usize,
}

impl Default for SqpOptions {
    fn default() -> Self {
        SqpOptions { feas_tol: SQP_FEAS_TOL, opt_tol: SQP_OPT_TOL, max_iter: SQP_MAX_ITER }
    }
}

fn violation_inf(g: &DVector<f64>, is_eq: &[bool]) -> f64 {
    let mut v: f64 = 0.0;
    for (i, &gi) in g.iter().enumerate() {
        v = if is_eq[i] { v.max(gi.abs()) } else { v.max(gi) };
    }
    v
}

fn violation_l1(g: &DVector<f64>, is_eq: &[bool]) -> f64 {
    let mut v = 0.0;
    for (i, &gi) in g.iter().enumerate() {
        v += if is_eq[i] { gi.abs() } else { gi.max(0.0) };
    }
    v
}

/// Central finite-difference audit of the user-supplied derivatives,
/// executed once per solve in debug builds.
fn debug_check_gradients(p: &NlpProblem) {
    let x = &p.x0;
    let (_, grad) = (p.objective)(x);
    let (g0, jac) = (p.constraints)(x);
    let scale_f = 1.0 + grad.amax();
    let scale_c = 1.0 + jac.amax();
    for j in 0..p.dim {
        let h = FD_STEP_REL * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let (fp, _) = (p.objective)(&xp);
        let (fm, _) = (p.objective)(&xm);
        let fd = (fp - fm) / (2.0 * h);
        debug_assert!(
            (fd - grad[j]).abs() <= 1e-5 * scale_f,
            "objective gradient mismatch at coordinate {j}: analytic {} vs fd {fd}",
            grad[j]
        );
        let (cp, _) = (p.constraints)(&xp);
        let (cm, _) = (p.constraints)(&xm);
        for i in 0..g0.len() {
            let fd = (cp[i] - cm[i]) / (2.0 * h);
            debug_assert!(
                (fd - jac[(i, j)]).abs() <= 1e-5 * scale_c,
                "constraint {i} Jacobian mismatch at coordinate {j}: analytic {} vs fd {fd}",
                jac[(i, j)]
            );
        }
    }
}

/// Solves the NLP by sequential quadratic programming.
///
/// Each iteration linearizes the constraints, solves a convex QP for the
/// step (falling back to an elastic relaxation with a scalar slack when the
/// linearization is infeasible), globalizes with an Armijo line search on
/// the l1 merit function, and updates a damped BFGS model of the Lagrangian
/// Hessian. Declares infeasibility at a stationary point of the constraint
/// violation, and carries the best feasible iterate through iteration-limit
/// and numerical-failure exits.
pub fn sqp_solve(p: &NlpProblem, opts: &SqpOptions) -> SolveReport {
    #[cfg(debug_assertions)]
    debug_check_gradients(p);

    let n = p.dim;
    let n_con = p.is_eq.len();
    let mut z = p.x0.clone();
    let (mut f, mut grad) = (p.objective)(&z);
    let (mut g, mut jac) = (p.constraints)(&z);
    assert_eq!(g.len(), n_con, "constraint count must match is_eq tags");
    assert!(
        f.is_finite() && grad.iter().all(|v| v.is_finite()) && g.iter().all(|v| v.is_finite()),
        "callbacks must be finite at the initial point"
    );

    let mut b = DMatrix::<f64>::identity(n, n);
    let mut sigma = 10.0f64;
    let mut best_feasible: Option<(DVector<f64>, f64)> = None;
    let mut kkt_res = f64::INFINITY;
    let mut resets_in_row = 0usize;

    let finish = |status: SolveStatus,
                  z: DVector<f64>,
                  best: Option<(DVector<f64>, f64)>,
                  kkt: f64,
                  iters: usize|
     -> SolveReport {
        let (sol, obj) = match (&status, best) {
            (SolveStatus::Optimal, _) => {
                let (fo, _) = (p.objective)(&z);
                (z, fo)
            }
            (_, Some((bz, bf))) => (bz, bf),
            (_, None) => {
                let (fo, _) = (p.objective)(&z);
                (z, fo)
            }
        };
        let (gv, _) = (p.constraints)(&sol);
        SolveReport {
            status,
            max_violation: violation_inf(&gv, &p.is_eq),
            objective: obj,
            solution: sol,
            kkt_residual: kkt,
            iterations: iters,
        }
    };

    for iter in 1..=opts.max_iter {
        let viol = violation_inf(&g, &p.is_eq);
        let viol1 = violation_l1(&g, &p.is_eq);
        if viol <= opts.feas_tol && best_feasible.as_ref().map_or(true, |(_, bf)| f < *bf) {
            best_feasible = Some((z.clone(), f));
        }

        // --- QP subproblem --------------------------------------------
        let n_eq = p.is_eq.iter().filter(|&&e| e).count();
        let n_in = n_con - n_eq;
        let mut a_in = DMatrix::<f64>::zeros(n_in, n);
        let mut b_in = DVector::<f64>::zeros(n_in);
        let mut a_eq = DMatrix::<f64>::zeros(n_eq, n);
        let mut b_eq = DVector::<f64>::zeros(n_eq);
        let (mut ii, mut ie) = (0usize, 0usize);
        for i in 0..n_con {
            if p.is_eq[i] {
                a_eq.row_mut(ie).copy_from(&jac.row(i));
                b_eq[ie] = -g[i];
                ie += 1;
            } else {
                a_in.row_mut(ii).copy_from(&jac.row(i));
                b_in[ii] = -g[i];
                ii += 1;
            }
        }

        let hard = QuadraticProgram {
            h: b.clone(),
            g: grad.clone(),
            a_ineq: a_in.clone(),
            b_ineq: b_in.clone(),
            a_eq: a_eq.clone(),
            b_eq: b_eq.clone(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        };
        let warm = if viol <= 1e-12 { Some(DVector::zeros(n)) } else { None };
        let (hrep, hduals) = qp_solve_with_duals(&hard, warm.as_ref());

        let (d, lam_in, lam_eq);
        if hrep.status == SolveStatus::Optimal {
            d = hrep.solution.rows(0, n).into_owned();
            // Bound rows cannot be active (free bounds): user rows lead.
            lam_in = hduals.ineq.rows(0, n_in).into_owned();
            lam_eq = hduals.eq;
        } else {
            // Elastic relaxation: one scalar slack bounds every violated
            // row; keeps the subproblem feasible from (0, viol_inf).
            let dim_e = n + 1;
            let mut h_e = DMatrix::<f64>::zeros(dim_e, dim_e);
            h_e.view_mut((0, 0), (n, n)).copy_from(&b);
            h_e[(n, n)] = 1e-6; // keeps the elastic QP strictly convex in t
            let mut g_e = DVector::<f64>::zeros(dim_e);
            g_e.rows_mut(0, n).copy_from(&grad);
            let sigma_e = (10.0 * sigma).max(100.0);
            g_e[n] = sigma_e;
            let rows_e = n_in + 2 * n_eq;
            let mut a_e = DMatrix::<f64>::zeros(rows_e, dim_e);
            let mut b_e = DVector::<f64>::zeros(rows_e);
            for i in 0..n_in {
                a_e.view_mut((i, 0), (1, n)).copy_from(&a_in.row(i));
                a_e[(i, n)] = -1.0;
                b_e[i] = b_in[i];
            }
            for e in 0..n_eq {
                let r = n_in + 2 * e;
                a_e.view_mut((r, 0), (1, n)).copy_from(&a_eq.row(e));
                a_e[(r, n)] = -1.0;
                b_e[r] = b_eq[e];
                let r2 = r + 1;
                a_e.view_mut((r2, 0), (1, n)).copy_from(&(-a_eq.row(e)));
                a_e[(r2, n)] = -1.0;
                b_e[r2] = -b_eq[e];
            }
            let mut bounds_e = vec![(f64::NEG_INFINITY, f64::INFINITY); dim_e];
            bounds_e[n] = (0.0, f64::INFINITY);
            let qp_e = QuadraticProgram {
                h: h_e,
                g: g_e,
                a_ineq: a_e,
                b_ineq: b_e,
                a_eq: DMatrix::zeros(0, dim_e),
                b_eq: DVector::zeros(0),
                bounds: bounds_e,
            };
            let mut x0e = DVector::<f64>::zeros(dim_e);
            x0e[n] = viol * (1.0 + 1e-9) + 1e-12;
            let (erep, eduals) = qp_solve_with_duals(&qp_e, Some(&x0e));
            if erep.status != SolveStatus::Optimal {
                return finish(SolveStatus::NumericalFailure, z, best_feasible, kkt_res, iter);
            }
            d = erep.solution.rows(0, n).into_owned();
            let t_star = erep.solution[n];
            lam_in = eduals.ineq.rows(0, n_in).into_owned();
            let mut le = DVector::<f64>::zeros(n_eq);
            for e in 0..n_eq {
                le[e] = eduals.ineq[n_in + 2 * e] - eduals.ineq[n_in + 2 * e + 1];
            }
            lam_eq = le;

            // Infeasibility certificate: the violation has a stationary
            // point with positive residual. If a feasible iterate was seen
            // earlier, the problem is not infeasible; report the breakdown
            // instead and carry that point.
            if t_star > opts.feas_tol && d.amax() <= 1e-8 * (1.0 + z.amax()) {
                let status = if best_feasible.is_none() {
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::NumericalFailure
                };
                return finish(status, z, best_feasible, kkt_res, iter);
            }
        }

        // --- Convergence test ------------------------------------------
        // Stationarity of the Lagrangian with the QP multipliers.
        let mut station = grad.clone();
        let (mut ii, mut ie) = (0usize, 0usize);
        let mut comp: f64 = 0.0;
        for i in 0..n_con {
            if p.is_eq[i] {
                station += jac.row(i).transpose() * lam_eq[ie];
                ie += 1;
            } else {
                station += jac.row(i).transpose() * lam_in[ii];
                comp = comp.max((lam_in[ii] * g[i]).abs());
                ii += 1;
            }
        }
        kkt_res = station.amax();
        if viol <= opts.feas_tol && kkt_res <= opts.opt_tol && comp <= opts.opt_tol.max(1e-6) {
            return finish(SolveStatus::Optimal, z, best_feasible, kkt_res, iter);
        }
        if d.amax() <= 1e-14 * (1.0 + z.amax()) && viol <= opts.feas_tol {
            // Degenerate stationary step with loose multipliers: accept as
            // optimal only if the KKT residual is already tight; otherwise
            // reset the model and retry once.
            if kkt_res <= opts.opt_tol || resets_in_row > 0 {
                return finish(SolveStatus::Optimal, z, best_feasible, kkt_res, iter);
            }
            b = DMatrix::identity(n, n);
            resets_in_row += 1;
            continue;
        }

        // --- Merit line search ------------------------------------------
        let lam_max = lam_in.amax().max(lam_eq.amax());
        sigma = sigma.max(1.5 * lam_max + 1.0);
        let phi0 = f + sigma * viol1;
        // Linearized l1 violation after the step (zero for the hard QP).
        let mut lin_viol = 0.0;
        {
            let jd = &jac * &d;
            for i in 0..n_con {
                let gi = g[i] + jd[i];
                lin_viol += if p.is_eq[i] { gi.abs() } else { gi.max(0.0) };
            }
        }
        let ddir = grad.dot(&d) + sigma * (lin_viol - viol1);
        let mut alpha = 1.0f64;
        let mut accepted = None;
        if ddir < 0.0 {
            while alpha >= 1e-12 {
                let z_try = &z + &d * alpha;
                let (ft, grad_t) = (p.objective)(&z_try);
                let (gt, jac_t) = (p.constraints)(&z_try);
                let phi = ft + sigma * violation_l1(&gt, &p.is_eq);
                if phi.is_finite() && phi <= phi0 + 0.1 * alpha * ddir {
                    accepted = Some((z_try, ft, grad_t, gt, jac_t));
                    break;
                }
                alpha *= 0.5;
            }
        }
        if accepted.is_none() {
            // No descent: refresh the curvature model once, then give up.
            if resets_in_row == 0 {
                b = DMatrix::identity(n, n);
                resets_in_row += 1;
                continue;
            }
            let status = if viol <= opts.feas_tol {
                SolveStatus::Optimal // feasible, merit saturated at tolerance level
            } else {
                SolveStatus::NumericalFailure
            };
            return finish(status, z, best_feasible, kkt_res, iter);
        }
        resets_in_row = 0;
        let (z_new, fz, grad_new, gz, jac_new) = accepted.unwrap();

        // --- BFGS update -------------------------------------------------
        let mut grad_l_old = grad.clone();
        let mut grad_l_new = grad_new.clone();
        let (mut ii, mut ie) = (0usize, 0usize);
        for i in 0..n_con {
            let lam = if p.is_eq[i] {
                ie += 1;
                lam_eq[ie - 1]
            } else {
                ii += 1;
                lam_in[ii - 1]
            };
            if lam != 0.0 {
                grad_l_old += jac.row(i).transpose() * lam;
                grad_l_new += jac_new.row(i).transpose() * lam;
            }
        }
        let s = &z_new - &z;
        let y = &grad_l_new - &grad_l_old;
        let sbs = (s.transpose() * &b * &s)[(0, 0)];
        let sy = s.dot(&y);
        if sbs > 0.0 {
            // Powell damping keeps the update positive definite.
            let y_eff = if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                &y * theta + (&b * &s) * (1.0 - theta)
            } else {
                y.clone()
            };
            let sy_eff = s.dot(&y_eff);
            if sy_eff > 1e-12 * s.norm_squared().max(1e-300) {
                let bs = &b * &s;
                b -= (&bs * bs.transpose()) / sbs;
                b += (&y_eff * y_eff.transpose()) / sy_eff;
            } else {
                b = DMatrix::identity(n, n);
            }
        } else {
            b = DMatrix::identity(n, n);
        }

        z = z_new;
        f = fz;
        g = gz;
        grad = grad_new;
        jac = jac_new;
    }

    finish(SolveStatus::IterationLimit, z, best_feasible, kkt_res, opts.max_iter)
}
