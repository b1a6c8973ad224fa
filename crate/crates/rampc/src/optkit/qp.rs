//! Primal active-set method for dense convex quadratic programs.

use nalgebra::{DMatrix, DVector};

use super::{lp_solve, LinearProgram, SolveReport, SolveStatus};
use crate::tol::{QP_LEVENBERG_REL, QP_TOL};

/// `min 0.5 x'Hx + g'x` subject to `A_ineq x <= b_ineq`, `A_eq x = b_eq`,
/// and bounds. `H` must be symmetric positive semidefinite; a small
/// Levenberg shift is applied automatically when the reduced Hessian is
/// numerically singular.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub bounds: Vec<(f64, f64)>,
}

impl QuadraticProgram {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        QuadraticProgram {
            h,
            g,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        }
    }
}

/// Dual multipliers split by row family, aligned with the original problem.
#[derive(Debug, Clone)]
pub struct QpDuals {
    /// One multiplier per inequality row (`>= 0`, zero when inactive).
    pub ineq: DVector<f64>,
    /// One multiplier per equality row (sign-free).
    pub eq: DVector<f64>,
}

/// Convenience wrapper returning only the report.
pub fn qp_solve(qp: &QuadraticProgram, x0: Option<&DVector<f64>>) -> SolveReport {
    qp_solve_with_duals(qp, x0).0
}

/// Solves the QP and additionally returns the dual multipliers, which the
/// SQP layer consumes.
pub fn qp_solve_with_duals(
    qp: &QuadraticProgram,
    x0: Option<&DVector<f64>>,
) -> (SolveReport, QpDuals) {
    let n = qp.g.len();
    let m_eq = qp.a_eq.nrows();

    // Fold bounds into the inequality block: rows are ordered
    // [user inequalities, upper bounds, lower bounds] for determinism.
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..qp.a_ineq.nrows() {
        rows.push((qp.a_ineq.row(i).transpose(), qp.b_ineq[i]));
    }
    for (j, &(lo, hi)) in qp.bounds.iter().enumerate() {
        if hi.is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = 1.0;
            rows.push((a, hi));
        }
        if lo.is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = -1.0;
            rows.push((a, -lo));
        }
    }
    let m_in = rows.len();

    let viol_at = |x: &DVector<f64>| -> f64 {
        let mut v: f64 = 0.0;
        for (a, b) in &rows {
            v = v.max(a.dot(x) - b);
        }
        for i in 0..m_eq {
            v = v.max((qp.a_eq.row(i) * x)[(0, 0)] - qp.b_eq[i]).max(qp.b_eq[i] - (qp.a_eq.row(i) * x)[(0, 0)]);
        }
        v
    };

    // --- Feasible starting point ---------------------------------------
    let mut x = match x0 {
        Some(x0) if viol_at(x0) <= 1e-10 => x0.clone(),
        _ => {
            let lp = LinearProgram {
                c: DVector::zeros(n),
                a_ineq: qp.a_ineq.clone(),
                b_ineq: qp.b_ineq.clone(),
                a_eq: qp.a_eq.clone(),
                b_eq: qp.b_eq.clone(),
                bounds: qp.bounds.clone(),
            };
            let r = lp_solve(&lp);
            if r.status != SolveStatus::Optimal {
                let status = if r.status == SolveStatus::Infeasible {
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::NumericalFailure
                };
                return (
                    SolveReport {
                        status,
                        solution: r.solution,
                        objective: f64::NAN,
                        max_violation: r.max_violation,
                        kkt_residual: f64::NAN,
                        iterations: r.iterations,
                    },
                    QpDuals { ineq: DVector::zeros(m_in), eq: DVector::zeros(m_eq) },
                );
            }
            r.solution
        }
    };

    // --- Active-set iterations ------------------------------------------
    let mut working: Vec<usize> = Vec::new(); // indices into `rows`
    let trace_h = qp.h.trace();
    let mut iterations = 0usize;
    let max_iter = 50 * (n + m_in + m_eq + 2);
    let mut lam_in = DVector::zeros(m_in);
    let mut lam_eq = DVector::zeros(m_eq);

    loop {
        iterations += 1;
        if iterations > max_iter {
            let f = 0.5 * (x.transpose() * &qp.h * &x)[(0, 0)] + qp.g.dot(&x);
            return (
                SolveReport {
                    status: SolveStatus::IterationLimit,
                    solution: x,
                    objective: f,
                    max_violation: 0.0,
                    kkt_residual: f64::NAN,
                    iterations,
                },
                QpDuals { ineq: lam_in, eq: lam_eq },
            );
        }

        // KKT system over the working set plus all equality rows.
        let k = m_eq + working.len();
        let dim = n + k;
        let grad = &qp.h * &x + &qp.g;
        let mut lam = DVector::<f64>::zeros(k);
        let mut d = DVector::<f64>::zeros(n);
        let mut shift = 0.0f64;
        let mut solved = false;
        for attempt in 0..4 {
            let mut kkt = DMatrix::<f64>::zeros(dim, dim);
            for i in 0..n {
                for j in 0..n {
                    kkt[(i, j)] = qp.h[(i, j)];
                }
                kkt[(i, i)] += shift;
            }
            for e in 0..m_eq {
                for j in 0..n {
                    kkt[(n + e, j)] = qp.a_eq[(e, j)];
                    kkt[(j, n + e)] = qp.a_eq[(e, j)];
                }
            }
            for (w, &ri) in working.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + m_eq + w, j)] = rows[ri].0[j];
                    kkt[(j, n + m_eq + w)] = rows[ri].0[j];
                }
            }
            let mut rhs = DVector::<f64>::zeros(dim);
            for i in 0..n {
                rhs[i] = -grad[i];
            }
            let lu = kkt.clone().full_piv_lu();
            if let Some(sol) = lu.solve(&rhs) {
                let ok = sol.iter().all(|v| v.is_finite());
                if ok {
                    d = sol.rows(0, n).into_owned();
                    lam = sol.rows(n, k).into_owned();
                    // Reject spurious solutions of singular systems.
                    let res = (&kkt * &sol - &rhs).amax();
                    if res <= 1e-7 * (1.0 + rhs.amax()) {
                        solved = true;
                        break;
                    }
                }
            }
            shift = if attempt == 0 {
                QP_LEVENBERG_REL * trace_h.abs().max(1.0) / n as f64
            } else {
                shift * 100.0
            };
        }
        if !solved {
            let f = 0.5 * (x.transpose() * &qp.h * &x)[(0, 0)] + qp.g.dot(&x);
            let viol = viol_at(&x).max(0.0);
            return (
                SolveReport {
                    status: SolveStatus::NumericalFailure,
                    solution: x,
                    objective: f,
                    max_violation: viol,
                    kkt_residual: f64::NAN,
                    iterations,
                },
                QpDuals { ineq: lam_in, eq: lam_eq },
            );
        }

        if d.amax() <= 1e-11 * (1.0 + x.amax()) {
            // Stationary on the working set: check multiplier signs.
            let mut drop = None;
            for (w, &ri) in working.iter().enumerate() {
                if lam[m_eq + w] < -QP_TOL {
                    // Lowest constraint index wins (anti-cycling).
                    if drop.map_or(true, |(prev, _): (usize, usize)| ri < prev) {
                        drop = Some((ri, w));
                    }
                }
            }
            match drop {
                None => {
                    lam_in = DVector::zeros(m_in);
                    for (w, &ri) in working.iter().enumerate() {
                        lam_in[ri] = lam[m_eq + w].max(0.0);
                    }
                    lam_eq = lam.rows(0, m_eq).into_owned();
                    let f = 0.5 * (x.transpose() * &qp.h * &x)[(0, 0)] + qp.g.dot(&x);
                    // Stationarity residual of the original problem.
                    let mut station = (&qp.h * &x + &qp.g).clone_owned();
                    for (ri, (a, _)) in rows.iter().enumerate() {
                        if lam_in[ri] != 0.0 {
                            station += a * lam_in[ri];
                        }
                    }
                    for e in 0..m_eq {
                        station += qp.a_eq.row(e).transpose() * lam_eq[e];
                    }
                    return (
                        SolveReport {
                            status: SolveStatus::Optimal,
                            solution: x.clone(),
                            objective: f,
                            max_violation: viol_at(&x).max(0.0),
                            kkt_residual: station.amax(),
                            iterations,
                        },
                        QpDuals { ineq: lam_in, eq: lam_eq },
                    );
                }
                Some((_, w)) => {
                    working.remove(w);
                }
            }
            continue;
        }

        // Step length to the nearest blocking constraint. Rows are scanned
        // in ascending index order and only strict improvements replace the
        // incumbent, so ties resolve to the lowest constraint index.
        let mut alpha = 1.0f64;
        let mut blocker: Option<usize> = None;
        for (ri, (a, b)) in rows.iter().enumerate() {
            if working.contains(&ri) {
                continue;
            }
            let ad = a.dot(&d);
            if ad > 1e-12 {
                let ratio = ((b - a.dot(&x)) / ad).max(0.0);
                if ratio < alpha - 1e-12 {
                    alpha = ratio;
                    blocker = Some(ri);
                }
            }
        }
        x += &d * alpha;
        if let Some(ri) = blocker {
            working.push(ri);
            working.sort_unstable();
        }
    }
}
