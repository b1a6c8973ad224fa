//! Parameter-affine discrete-time system models.
//!
//! The plant family has the form
//! `x+ = f(x,u) + G(x,u) theta + E d`, where `f` and the columns of `G` are
//! polynomial maps of the state/input pair, `theta` is an unknown constant
//! parameter vector confined to a hypercube, and `d` is a bounded additive
//! disturbance. Polynomial maps are stored as explicit term lists, which
//! makes evaluation, exact differentiation, and JSON round-tripping
//! straightforward.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::HypercubeSet;
use crate::tol::FD_STEP_REL;

/// One monomial term `coeff * prod_i w_i^exps[i]` in the joint variable
/// `w = (x, u)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term {
    pub coeff: f64,
    /// Exponents over the concatenated `(x, u)` vector; length `n + m`.
    pub exps: Vec<u32>,
}

/// A vector-valued polynomial map of `(x, u)`, one term list per output row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyMap {
    /// State dimension of the input space.
    pub n: usize,
    /// Input dimension of the input space.
    pub m: usize,
    /// `rows[i]` is the term list of output coordinate `i`.
    pub rows: Vec<Vec<Term>>,
}

impl PolyMap {
    pub fn zeros(n: usize, m: usize, dim_out: usize) -> Self {
        Self { n, m, rows: vec![Vec::new(); dim_out] }
    }

    pub fn dim_out(&self) -> usize {
        self.rows.len()
    }

    fn eval_term(term: &Term, w: &[f64]) -> f64 {
        let mut v = term.coeff;
        for (i, &e) in term.exps.iter().enumerate() {
            for _ in 0..e {
                v *= w[i];
            }
        }
        v
    }

    /// Partial derivative of one term with respect to joint coordinate `j`.
    fn eval_term_deriv(term: &Term, w: &[f64], j: usize) -> f64 {
        let e_j = term.exps[j];
        if e_j == 0 {
            return 0.0;
        }
        let mut v = term.coeff * f64::from(e_j);
        for (i, &e) in term.exps.iter().enumerate() {
            let e = if i == j { e - 1 } else { e };
            for _ in 0..e {
                v *= w[i];
            }
        }
        v
    }

    fn joint(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n + self.m);
        w.extend(x.iter());
        w.extend(u.iter());
        w
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let w = self.joint(x, u);
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|terms| terms.iter().map(|t| Self::eval_term(t, &w)).sum()),
        )
    }

    /// Exact Jacobian with respect to the state block.
    pub fn jac_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let w = self.joint(x, u);
        DMatrix::from_fn(self.rows.len(), self.n, |i, j| {
            self.rows[i].iter().map(|t| Self::eval_term_deriv(t, &w, j)).sum()
        })
    }

    /// Exact Jacobian with respect to the input block.
    pub fn jac_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let w = self.joint(x, u);
        DMatrix::from_fn(self.rows.len(), self.m, |i, j| {
            self.rows[i].iter().map(|t| Self::eval_term_deriv(t, &w, self.n + j)).sum()
        })
    }
}

/// Convenience constructor for a term: `term(c, &[e_x1, e_x2, ..., e_u...])`.
pub fn term(coeff: f64, exps: &[u32]) -> Term {
    Term { coeff, exps: exps.to_vec() }
}

/// Box bounds for the joint state/input constraint set, used by design
/// grids and the parameter estimator's step-size rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxHint {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
}

/// Pointwise constraint set `{(x,u) : h_j(x,u) <= 0, j = 1..r}` together
/// with a box hint covering it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// Constraint rows as a polynomial map; the feasible set is `h <= 0`.
    pub h: PolyMap,
    pub box_hint: BoxHint,
}

impl ConstraintSet {
    pub fn r(&self) -> usize {
        self.h.dim_out()
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.h.eval(x, u)
    }

    /// Builds the standard row set of a box: for each state coordinate the
    /// pair `x_i - hi <= 0`, `lo - x_i <= 0`, then the same for each input
    /// coordinate.
    pub fn from_box(n: usize, m: usize, box_hint: BoxHint) -> Self {
        let mut rows = Vec::new();
        let dim = n + m;
        for i in 0..n {
            let mut e = vec![0u32; dim];
            e[i] = 1;
            rows.push(vec![term(1.0, &e), term(-box_hint.x_hi[i], &vec![0; dim])]);
            rows.push(vec![term(-1.0, &e), term(box_hint.x_lo[i], &vec![0; dim])]);
        }
        for j in 0..m {
            let mut e = vec![0u32; dim];
            e[n + j] = 1;
            rows.push(vec![term(1.0, &e), term(-box_hint.u_hi[j], &vec![0; dim])]);
            rows.push(vec![term(-1.0, &e), term(box_hint.u_lo[j], &vec![0; dim])]);
        }
        Self { h: PolyMap { n, m, rows }, box_hint }
    }
}

/// Quadratic stage cost `l(x,u) = x'Qx + u'Ru`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl StageCost {
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }
}

/// Parameter-affine model `x+ = f(x,u) + sum_i theta_i g_i(x,u) + E d` with
/// `d` confined to the hypercube of radius `dist_radius`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamAffineModel {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub f: PolyMap,
    /// One `n`-dimensional polynomial map per parameter component.
    pub g: Vec<PolyMap>,
    pub e: DMatrix<f64>,
    pub dist_radius: f64,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model dimensions inconsistent: {0}")]
    Dimensions(String),
    #[error("failed to parse system description: {0}")]
    Parse(String),
}

impl ParamAffineModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.f.dim_out() != self.n || self.f.n != self.n || self.f.m != self.m {
            return Err(ModelError::Dimensions("f map shape".into()));
        }
        if self.g.len() != self.p {
            return Err(ModelError::Dimensions("number of g maps".into()));
        }
        for gi in &self.g {
            if gi.dim_out() != self.n || gi.n != self.n || gi.m != self.m {
                return Err(ModelError::Dimensions("g map shape".into()));
            }
        }
        if self.e.nrows() != self.n || self.e.ncols() != self.q {
            return Err(ModelError::Dimensions("E shape".into()));
        }
        if !self.dist_radius.is_finite() || self.dist_radius < 0.0 {
            return Err(ModelError::Dimensions("dist_radius".into()));
        }
        Ok(())
    }

    /// Columns of `G(x,u)`, stacked as an `n x p` matrix.
    pub fn eval_g(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n, self.p);
        for (i, gi) in self.g.iter().enumerate() {
            g.set_column(i, &gi.eval(x, u));
        }
        g
    }

    /// Nominal successor `f(x,u) + G(x,u) theta` (no disturbance).
    pub fn eval_f_theta(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = self.f.eval(x, u);
        for (i, gi) in self.g.iter().enumerate() {
            out += gi.eval(x, u) * theta[i];
        }
        out
    }

    /// Full successor `f(x,u) + G(x,u) theta + E d`.
    pub fn eval_fw(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DVector<f64> {
        self.eval_f_theta(x, u, theta) + &self.e * d
    }

    /// Exact Jacobians `(A, B)` of the nominal successor with respect to
    /// `x` and `u`, using the analytic derivatives of the term lists.
    pub fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = self.f.jac_x(x, u);
        let mut b = self.f.jac_u(x, u);
        for (i, gi) in self.g.iter().enumerate() {
            a += gi.jac_x(x, u) * theta[i];
            b += gi.jac_u(x, u) * theta[i];
        }
        (a, b)
    }

    /// Jacobians of `x, u -> G(x, u) theta` for a fixed parameter vector
    /// (the parametric part alone, without the nominal dynamics).
    pub fn g_theta_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = DMatrix::zeros(self.n, self.n);
        let mut b = DMatrix::zeros(self.n, self.m);
        for (i, gi) in self.g.iter().enumerate() {
            a += gi.jac_x(x, u) * theta[i];
            b += gi.jac_u(x, u) * theta[i];
        }
        (a, b)
    }

    /// Central finite-difference Jacobians with per-coordinate step
    /// `FD_STEP_REL * max(1, |value|)`; fallback/check path for the analytic
    /// derivatives.
    pub fn jacobians_fd(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let h = FD_STEP_REL * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (self.eval_f_theta(&xp, u, theta) - self.eval_f_theta(&xm, u, theta)) / (2.0 * h);
            a.set_column(j, &col);
        }
        let mut b = DMatrix::zeros(self.n, self.m);
        for j in 0..self.m {
            let h = FD_STEP_REL * u[j].abs().max(1.0);
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let col = (self.eval_f_theta(x, &up, theta) - self.eval_f_theta(x, &um, theta)) / (2.0 * h);
            b.set_column(j, &col);
        }
        (a, b)
    }
}

/// Complete problem instance: plant family, constraints, stage cost, initial
/// parameter set, and the true parameter used by simulations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub model: ParamAffineModel,
    pub constraints: ConstraintSet,
    pub cost: StageCost,
    pub theta_set0: HypercubeSet,
    pub theta_star: DVector<f64>,
}

impl SystemSpec {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let spec: SystemSpec =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        spec.model.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("system spec serializes")
    }
}

/// Benchmark system: a two-state continuous stirred-tank reactor style
/// bilinear plant discretized with step 0.05, two uncertain parameters with
/// nominal set center (1.01, 0.99) and radius 0.01, state box
/// `[-0.1, 0.1]^2`, input box `[-2, 2]`, additive disturbance
/// `0.05 * I * d` with `|d|_inf <= 5e-5`, and stage cost
/// `0.1 |x|^2 + u^2`.
pub fn example_system() -> SystemSpec {
    let t0 = 0.05;
    let n = 2;
    let m = 1;
    // f(x, u) = x + t0 * [0.5 (1 + x1) u, 0.5 (1 - 4 x2) u]
    let f = PolyMap {
        n,
        m,
        rows: vec![
            vec![term(1.0, &[1, 0, 0]), term(0.5 * t0, &[0, 0, 1]), term(0.5 * t0, &[1, 0, 1])],
            vec![term(1.0, &[0, 1, 0]), term(0.5 * t0, &[0, 0, 1]), term(-2.0 * t0, &[0, 1, 1])],
        ],
    };
    // g1(x) = t0 * (-x2, 0), g2(x) = t0 * (0, x1)
    let g1 = PolyMap { n, m, rows: vec![vec![term(-t0, &[0, 1, 0])], vec![]] };
    let g2 = PolyMap { n, m, rows: vec![vec![], vec![term(t0, &[1, 0, 0])]] };
    let model = ParamAffineModel {
        n,
        m,
        p: 2,
        q: 2,
        f,
        g: vec![g1, g2],
        e: DMatrix::from_diagonal_element(2, 2, t0),
        dist_radius: 0.5e-4,
    };
    let box_hint = BoxHint {
        x_lo: vec![-0.1, -0.1],
        x_hi: vec![0.1, 0.1],
        u_lo: vec![-2.0],
        u_hi: vec![2.0],
    };
    let constraints = ConstraintSet::from_box(n, m, box_hint);
    let cost = StageCost {
        q: DMatrix::from_diagonal_element(2, 2, 0.1),
        r: DMatrix::from_diagonal_element(1, 1, 1.0),
    };
    SystemSpec {
        model,
        constraints,
        cost,
        theta_set0: HypercubeSet::new(DVector::from_vec(vec![1.01, 0.99]), 0.01),
        theta_star: DVector::from_vec(vec![1.0, 1.0]),
    }
}
