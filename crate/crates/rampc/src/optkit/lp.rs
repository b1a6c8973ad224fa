//! Dense two-phase simplex with Bland's anti-cycling rule.

use nalgebra::{DMatrix, DVector};

use super::{SolveReport, SolveStatus};
use crate::tol::{LP_FEAS_TOL, LP_PIVOT_TOL};

/// `min c'x` subject to `A_ineq x <= b_ineq`, `A_eq x = b_eq`, and
/// per-variable bounds `lo <= x <= hi` (entries may be infinite).
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub c: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    /// Problem with no rows and free variables.
    pub fn new(c: DVector<f64>) -> Self {
        let n = c.len();
        LinearProgram {
            c,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        }
    }
}

/// How one original variable maps onto standard-form variables.
enum VarMap {
    /// `x = lo + x_s`
    Shift { col: usize, lo: f64 },
    /// `x = hi - x_s` (used when only the upper bound is finite)
    Mirror { col: usize, hi: f64 },
    /// `x = x_pos - x_neg` (free variable)
    Split { pos: usize, neg: usize },
}

struct Tableau {
    /// Row-reduced `[A | b]`, basis columns are unit vectors.
    t: DMatrix<f64>,
    basis: Vec<usize>,
    n_cols: usize,
}

impl Tableau {
    fn rhs(&self, row: usize) -> f64 {
        self.t[(row, self.n_cols)]
    }

    /// One simplex phase: minimize `cost` over the current tableau.
    /// Returns `(optimal_reached, pivots)`; `false` means unbounded.
    fn run(&mut self, cost: &DVector<f64>, allow: &[bool], max_pivots: usize) -> (bool, usize) {
        let m = self.t.nrows();
        let mut pivots = 0;
        loop {
            // Reduced costs z_j = c_j - c_B' (B^-1 A_j).
            let mut enter = None;
            for j in 0..self.n_cols {
                if !allow[j] || self.basis.contains(&j) {
                    continue;
                }
                let mut z = cost[j];
                for i in 0..m {
                    z -= cost[self.basis[i]] * self.t[(i, j)];
                }
                if z < -LP_PIVOT_TOL {
                    enter = Some(j); // Bland: lowest eligible index
                    break;
                }
            }
            let Some(j) = enter else {
                return (true, pivots);
            };
            // Ratio test; ties broken by the lowest basis variable index.
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = self.t[(i, j)];
                if a > LP_PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - LP_PIVOT_TOL
                                || (ratio < lr + LP_PIVOT_TOL && self.basis[i] < self.basis[li])
                            {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((i, _)) = leave else {
                return (false, pivots); // unbounded direction
            };
            self.pivot(i, j);
            pivots += 1;
            if pivots > max_pivots {
                return (true, pivots); // stalled; caller checks residuals
            }
        }
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.t[(row, col)];
        let ncols = self.t.ncols();
        for j in 0..ncols {
            self.t[(row, j)] /= piv;
        }
        for i in 0..self.t.nrows() {
            if i != row {
                let factor = self.t[(i, col)];
                if factor != 0.0 {
                    for j in 0..ncols {
                        let v = self.t[(row, j)];
                        self.t[(i, j)] -= factor * v;
                    }
                }
            }
        }
        self.basis[row] = col;
    }
}

/// Solves the linear program with a dense two-phase simplex method.
///
/// Distinguishes infeasible and unbounded outcomes; ties in the pivoting
/// rules are broken by lowest index (Bland), so the method terminates and
/// repeated calls are deterministic.
pub fn lp_solve(lp: &LinearProgram) -> SolveReport {
    let n = lp.c.len();
    assert_eq!(lp.bounds.len(), n, "one bound pair per variable");
    assert_eq!(lp.a_ineq.ncols(), n);
    assert_eq!(lp.a_eq.ncols(), n);

    // --- Standard-form conversion -------------------------------------
    let mut var_maps = Vec::with_capacity(n);
    let mut n_std = 0usize;
    let mut extra_rows = Vec::new(); // (std col, upper value) for boxed vars
    for &(lo, hi) in &lp.bounds {
        if lo.is_finite() {
            var_maps.push(VarMap::Shift { col: n_std, lo });
            if hi.is_finite() {
                extra_rows.push((n_std, hi - lo));
            }
            n_std += 1;
        } else if hi.is_finite() {
            var_maps.push(VarMap::Mirror { col: n_std, hi });
            n_std += 1;
        } else {
            var_maps.push(VarMap::Split { pos: n_std, neg: n_std + 1 });
            n_std += 2;
        }
    }

    let m_ineq = lp.a_ineq.nrows();
    let m_eq = lp.a_eq.nrows();
    let m = m_ineq + m_eq + extra_rows.len();
    // Columns: structural | slacks (one per ineq + extra row) | artificials.
    let n_slack = m_ineq + extra_rows.len();
    let width = n_std + n_slack + m; // worst case: artificial on every row
    let mut t = DMatrix::<f64>::zeros(m, width + 1);
    let mut std_cost = DVector::<f64>::zeros(width);

    // Structural part of a row: fold the variable substitutions.
    let write_row = |t: &mut DMatrix<f64>, row: usize, coeffs: &dyn Fn(usize) -> f64, b: f64| {
        let mut rhs = b;
        for (j, vm) in var_maps.iter().enumerate() {
            let a = coeffs(j);
            if a == 0.0 {
                continue;
            }
            match *vm {
                VarMap::Shift { col, lo } => {
                    t[(row, col)] += a;
                    rhs -= a * lo;
                }
                VarMap::Mirror { col, hi } => {
                    t[(row, col)] -= a;
                    rhs -= a * hi;
                }
                VarMap::Split { pos, neg } => {
                    t[(row, pos)] += a;
                    t[(row, neg)] -= a;
                }
            }
        }
        t[(row, width)] = rhs;
    };

    for i in 0..m_ineq {
        write_row(&mut t, i, &|j| lp.a_ineq[(i, j)], lp.b_ineq[i]);
    }
    for (k, &(col, ub)) in extra_rows.iter().enumerate() {
        let row = m_ineq + k;
        t[(row, col)] = 1.0;
        t[(row, width)] = ub;
    }
    for i in 0..m_eq {
        write_row(&mut t, m_ineq + extra_rows.len() + i, &|j| lp.a_eq[(i, j)], lp.b_eq[i]);
    }

    // Objective in standard variables.
    for (j, vm) in var_maps.iter().enumerate() {
        match *vm {
            VarMap::Shift { col, .. } => std_cost[col] += lp.c[j],
            VarMap::Mirror { col, .. } => std_cost[col] -= lp.c[j],
            VarMap::Split { pos, neg } => {
                std_cost[pos] += lp.c[j];
                std_cost[neg] -= lp.c[j];
            }
        }
    }

    // Slacks for inequality-type rows, then normalize rhs >= 0, then
    // artificials where no clean slack basis exists.
    let n_ineq_rows = m_ineq + extra_rows.len();
    for i in 0..n_ineq_rows {
        t[(i, n_std + i)] = 1.0;
    }
    let mut basis = vec![usize::MAX; m];
    let mut n_art = 0usize;
    let mut phase1_cost = DVector::<f64>::zeros(width);
    for i in 0..m {
        if t[(i, width)] < 0.0 {
            for j in 0..=width {
                t[(i, j)] = -t[(i, j)];
            }
        }
        let slack = if i < n_ineq_rows { Some(n_std + i) } else { None };
        match slack {
            Some(s) if t[(i, s)] > 0.5 => basis[i] = s, // +1 slack survives sign flip
            _ => {
                let a_col = n_std + n_slack + n_art;
                t[(i, a_col)] = 1.0;
                phase1_cost[a_col] = 1.0;
                basis[i] = a_col;
                n_art += 1;
            }
        }
    }
    let used_width = n_std + n_slack + n_art;
    let mut tab = Tableau {
        t: DMatrix::from_fn(m, used_width + 1, |i, j| {
            if j < used_width {
                t[(i, j)]
            } else {
                t[(i, width)]
            }
        }),
        basis,
        n_cols: used_width,
    };
    let phase1_cost = DVector::from_fn(used_width, |j, _| phase1_cost[j]);
    let std_cost = DVector::from_fn(used_width, |j, _| if j < n_std + n_slack { std_cost[j] } else { 0.0 });

    let max_pivots = 2000 * (m + used_width + 1);
    let allow_all = vec![true; used_width];
    let mut total_pivots = 0;

    // --- Phase 1 -------------------------------------------------------
    if n_art > 0 {
        let (_, piv) = tab.run(&phase1_cost, &allow_all, max_pivots);
        total_pivots += piv;
        let p1: f64 = (0..m).map(|i| phase1_cost[tab.basis[i]] * tab.rhs(i)).sum();
        if p1 > LP_FEAS_TOL {
            return SolveReport {
                status: SolveStatus::Infeasible,
                solution: DVector::zeros(n),
                objective: f64::NAN,
                max_violation: p1,
                kkt_residual: f64::NAN,
                iterations: total_pivots,
            };
        }
        // Drive leftover artificials out of the basis where possible.
        for i in 0..m {
            if tab.basis[i] >= n_std + n_slack {
                if let Some(j) = (0..n_std + n_slack)
                    .find(|&j| tab.t[(i, j)].abs() > LP_PIVOT_TOL && !tab.basis.contains(&j))
                {
                    tab.pivot(i, j);
                    total_pivots += 1;
                }
            }
        }
    }

    // --- Phase 2 -------------------------------------------------------
    // Artificial columns are barred from re-entering.
    let allow: Vec<bool> = (0..used_width).map(|j| j < n_std + n_slack).collect();
    let (bounded, piv) = tab.run(&std_cost, &allow, max_pivots);
    total_pivots += piv;
    if !bounded {
        return SolveReport {
            status: SolveStatus::Unbounded,
            solution: DVector::zeros(n),
            objective: f64::NEG_INFINITY,
            max_violation: 0.0,
            kkt_residual: f64::NAN,
            iterations: total_pivots,
        };
    }

    // --- Extract the solution in original variables ---------------------
    let mut x_std = DVector::<f64>::zeros(used_width);
    for i in 0..m {
        x_std[tab.basis[i]] = tab.rhs(i);
    }
    let mut x = DVector::<f64>::zeros(n);
    for (j, vm) in var_maps.iter().enumerate() {
        x[j] = match *vm {
            VarMap::Shift { col, lo } => lo + x_std[col],
            VarMap::Mirror { col, hi } => hi - x_std[col],
            VarMap::Split { pos, neg } => x_std[pos] - x_std[neg],
        };
    }
    let objective = lp.c.dot(&x);

    // Residuals in the original geometry.
    let mut viol: f64 = 0.0;
    if m_ineq > 0 {
        let r = &lp.a_ineq * &x - &lp.b_ineq;
        viol = viol.max(r.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0));
    }
    if m_eq > 0 {
        let r = &lp.a_eq * &x - &lp.b_eq;
        viol = viol.max(r.amax());
    }
    for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
        if lo.is_finite() {
            viol = viol.max(lo - x[j]);
        }
        if hi.is_finite() {
            viol = viol.max(x[j] - hi);
        }
    }
    // Stationarity: most negative reduced cost among admissible columns.
    let mut worst_rc: f64 = 0.0;
    for j in 0..used_width {
        if !allow[j] || tab.basis.contains(&j) {
            continue;
        }
        let mut z = std_cost[j];
        for i in 0..m {
            z -= std_cost[tab.basis[i]] * tab.t[(i, j)];
        }
        worst_rc = worst_rc.min(z);
    }
    let status = if viol > 1e3 * LP_FEAS_TOL || worst_rc < -1e3 * LP_PIVOT_TOL {
        SolveStatus::NumericalFailure
    } else {
        SolveStatus::Optimal
    };
    SolveReport {
        status,
        solution: x,
        objective,
        max_violation: viol.max(0.0),
        kkt_residual: -worst_rc,
        iterations: total_pivots,
    }
}
