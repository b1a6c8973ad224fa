//! Incremental-Lyapunov tube arithmetic.
//!
//! The controller separates a nominal trajectory from the real one and
//! bounds their distance, measured by `V_delta(x, z) = |x - z|_P`, with a
//! scalar tube size `s` propagated by `s+ = rho s + w`. This module holds
//! the geometry (`P`, the feedback family `K(z, v)`, contraction and
//! tightening constants) and the three interchangeable over-approximations
//! of the parametric uncertainty that produce the disturbance-bound term
//! `w_tilde`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::ParamAffineModel;

/// Which over-approximation of `{G(z,v) theta : |theta|_inf <= eta}` the
/// tube uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundVariant {
    /// Exact maximum over the hypercube vertices (tightest, `2^(p-1)`
    /// norm evaluations per point).
    Vertex,
    /// Norm ball `|theta|_2 <= sqrt(p) eta`, one singular value per point.
    NormBall,
    /// Global Lipschitz bound in the Euclidean frame; forces `P = I`,
    /// `K = 0`, and a parameter-ball contraction constant folded into
    /// `rho_base`.
    LipschitzBall,
}

/// Quadratic-norm tube geometry with a state/input-scheduled feedback
/// family `K(z, v)` parameterized by quadratic features of `(v, z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeGeometry {
    /// Symmetric positive definite metric of `V_delta`.
    pub p: DMatrix<f64>,
    /// Feedback coefficients, one `m x n` matrix per feature of
    /// [`feature_vector`]; empty for a zero feedback.
    pub k_coeffs: Vec<DMatrix<f64>>,
    /// `sqrt(lambda_min(P))`: lower norm-equivalence constant.
    pub c_delta_l: f64,
    /// `sqrt(lambda_max(P))`: upper norm-equivalence constant.
    pub c_delta_u: f64,
    /// Bound on `|K|_2 / c_delta_l` over the scheduling domain.
    pub kappa_max: f64,
    /// Radius (in `V_delta`) of the region where the contraction and
    /// tightening constants are valid; infinite for global variants.
    pub delta_loc: f64,
    /// Contraction rate at the initial parameter-set center.
    pub rho_base: f64,
    /// Sensitivity of the contraction rate to center drift (per unit of
    /// infinity-norm drift).
    pub l_brho: f64,
    /// Constraint tightening rates, one per constraint row.
    pub c: Vec<f64>,
}

impl TubeGeometry {
    /// `V_delta(x, z) = |x - z|_P`.
    pub fn v_delta(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let d = x - z;
        (&d.transpose() * &self.p * &d)[(0, 0)].max(0.0).sqrt()
    }

    pub fn p_norm(&self, d: &DVector<f64>) -> f64 {
        (d.transpose() * &self.p * d)[(0, 0)].max(0.0).sqrt()
    }

    /// Scheduled gain `K(z, v)`.
    pub fn k_at(&self, z: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        k_eval(&self.k_coeffs, z, v, v.len(), z.len())
    }

    /// Tube feedback `kappa(x, z, v) = v + K(z, v)(x - z)`.
    pub fn kappa(&self, x: &DVector<f64>, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        v + self.k_at(z, v) * (x - z)
    }
}

/// Evaluates a scheduled gain from its feature coefficients; an empty
/// coefficient list is the zero gain.
pub fn k_eval(
    k_coeffs: &[DMatrix<f64>],
    z: &DVector<f64>,
    v: &DVector<f64>,
    m: usize,
    n: usize,
) -> DMatrix<f64> {
    if k_coeffs.is_empty() {
        return DMatrix::zeros(m, n);
    }
    let feats = feature_vector(z, v);
    debug_assert_eq!(feats.len(), k_coeffs.len());
    let mut k = DMatrix::zeros(m, n);
    for (fi, ki) in feats.iter().zip(k_coeffs) {
        if *fi != 0.0 {
            k += ki * *fi;
        }
    }
    k
}

/// Quadratic feature vector of the scheduling variables, in the fixed order
/// `[1, v_i..., z_i..., squares of (v, z)..., cross products of (v, z)
/// (lexicographic)...]`.
pub fn feature_vector(z: &DVector<f64>, v: &DVector<f64>) -> Vec<f64> {
    let mut w = Vec::with_capacity(v.len() + z.len());
    w.extend(v.iter().copied());
    w.extend(z.iter().copied());
    let d = w.len();
    let mut feats = Vec::with_capacity(1 + d + d + d * (d - 1) / 2);
    feats.push(1.0);
    feats.extend(w.iter().copied());
    feats.extend(w.iter().map(|a| a * a));
    for i in 0..d {
        for j in i + 1..d {
            feats.push(w[i] * w[j]);
        }
    }
    feats
}

/// Number of features for given dimensions (see [`feature_vector`]).
pub fn feature_count(n: usize, m: usize) -> usize {
    let d = n + m;
    1 + 2 * d + d * (d - 1) / 2
}

/// Gradient of each feature with respect to the inputs and the state,
/// aligned with [`feature_vector`]: entry `l` is
/// `(d feat_l / d v, d feat_l / d z)`.
pub fn feature_gradients(z: &DVector<f64>, v: &DVector<f64>) -> Vec<(DVector<f64>, DVector<f64>)> {
    let m = v.len();
    let n = z.len();
    let d = m + n;
    let mut w = Vec::with_capacity(d);
    w.extend(v.iter().copied());
    w.extend(z.iter().copied());
    let mut grads: Vec<DVector<f64>> = Vec::with_capacity(feature_count(n, m));
    grads.push(DVector::zeros(d));
    for i in 0..d {
        let mut g = DVector::zeros(d);
        g[i] = 1.0;
        grads.push(g);
    }
    for i in 0..d {
        let mut g = DVector::zeros(d);
        g[i] = 2.0 * w[i];
        grads.push(g);
    }
    for i in 0..d {
        for j in i + 1..d {
            let mut g = DVector::zeros(d);
            g[i] = w[j];
            g[j] = w[i];
            grads.push(g);
        }
    }
    grads
        .into_iter()
        .map(|g| (g.rows(0, m).into_owned(), g.rows(m, n).into_owned()))
        .collect()
}

/// Data describing one uncertainty over-approximation, produced by the
/// offline design and consumed by the tube recursion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyBound {
    pub variant: BoundVariant,
    /// Unit hypercube vertices with first component fixed at `+1`
    /// (`2^(p-1)` of them; sign symmetry covers the rest). Vertex variant
    /// only.
    pub vertices: Vec<DVector<f64>>,
    /// Norm-ball scaling `nu = c_b * eta` (`c_b = sqrt(p)`).
    pub c_b: f64,
    /// Norm-ball Lipschitz constant of `w_tilde` in `s`.
    pub l_b: f64,
    /// Global Lipschitz constant of `f` (Euclidean frame).
    pub l_f: f64,
    /// Global Lipschitz constant of `G` (spectral norm, Euclidean frame).
    pub l_g: f64,
    /// Exact bound on `|E d|` in the tube norm over the disturbance box.
    pub d_bar: f64,
}

impl UncertaintyBound {
    /// Unit-box vertices with the sign symmetry quotiented out.
    pub fn half_vertices(p: usize) -> Vec<DVector<f64>> {
        (0..1usize << (p - 1))
            .map(|mask| {
                DVector::from_fn(p, |i, _| {
                    if i == 0 {
                        1.0
                    } else if mask >> (i - 1) & 1 == 1 {
                        -1.0
                    } else {
                        1.0
                    }
                })
            })
            .collect()
    }
}

/// Largest eigenvalue of a small symmetric matrix.
fn sym_lambda_max(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.max()
}

/// Parametric part of the disturbance bound at one point:
/// `w_tilde(eta, z, v) = sup {|G(z,v) theta|_* : theta in Theta-ball(eta)}`
/// in the variant's norm, plus the additive disturbance bound when
/// `include_additive` is set.
pub fn w_tilde(
    bound: &UncertaintyBound,
    geom: &TubeGeometry,
    model: &ParamAffineModel,
    eta: f64,
    z: &DVector<f64>,
    v: &DVector<f64>,
    include_additive: bool,
) -> f64 {
    let g = model.eval_g(z, v);
    let parametric = match bound.variant {
        BoundVariant::Vertex => {
            let mut worst = 0.0f64;
            for vert in &bound.vertices {
                worst = worst.max(geom.p_norm(&(&g * vert)));
            }
            eta * worst
        }
        BoundVariant::NormBall => {
            let gtpg = g.transpose() * &geom.p * &g;
            bound.c_b * eta * sym_lambda_max(&gtpg).max(0.0).sqrt()
        }
        BoundVariant::LipschitzBall => {
            let gtg = g.transpose() * &g;
            bound.c_b * eta * sym_lambda_max(&gtg).max(0.0).sqrt()
        }
    };
    parametric + if include_additive { bound.d_bar } else { 0.0 }
}

/// Sensitivity of `w_tilde_delta` to the tube size `s` (the `L_Theta` term).
///
/// Zero for the Lipschitz variant: its parameter-ball sensitivity is folded
/// into the constant contraction rate `rho_base` instead, matching the
/// classical constant-contraction robust recursion exactly.
pub fn l_theta(bound: &UncertaintyBound, geom: &TubeGeometry, eta: f64) -> f64 {
    match bound.variant {
        BoundVariant::Vertex => eta * geom.l_brho,
        BoundVariant::NormBall => eta * bound.l_b,
        BoundVariant::LipschitzBall => 0.0,
    }
}

/// Full per-step disturbance bound along a tube of size `s`:
/// `w_tilde_delta = w_tilde + L_Theta(eta) * s`.
#[allow(clippy::too_many_arguments)]
pub fn w_tilde_delta(
    bound: &UncertaintyBound,
    geom: &TubeGeometry,
    model: &ParamAffineModel,
    eta: f64,
    z: &DVector<f64>,
    v: &DVector<f64>,
    s: f64,
    include_additive: bool,
) -> f64 {
    w_tilde(bound, geom, model, eta, z, v, include_additive) + l_theta(bound, geom, eta) * s
}

/// One step of the scalar tube recursion.
pub fn tube_step(rho: f64, s: f64, w: f64) -> f64 {
    rho * s + w
}

/// Contraction rate valid for the current parameter set: the base rate
/// degrades with the worst-case center drift `(eta0 - eta_t)` at rate
/// `l_brho`. Constant for the Lipschitz variant (`l_brho = 0`).
pub fn rho_at(geom: &TubeGeometry, eta_t: f64, eta0: f64) -> f64 {
    geom.rho_base + (eta0 - eta_t) * geom.l_brho
}
