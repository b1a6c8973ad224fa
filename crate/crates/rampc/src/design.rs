//! Offline design pipeline: grid measurement of contraction/tightening
//! constants, contraction verification, and terminal-ingredient synthesis.
//!
//! All constants that enter the online controller are produced here, either
//! exactly (eigenvalue bounds, vertex enumerations) or as suprema over a
//! deterministic sampling lattice inflated by a documented safety factor.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::HypercubeSet;
use crate::model::{BoxHint, ConstraintSet, ParamAffineModel, StageCost};
use crate::optkit::{lp_solve, LinearProgram, SolveStatus};
use crate::tol::{
    CJ_ZERO_TOL, CONTRACTION_CHECK_TOL, EQUILIBRIUM_TOL, GRID_EXCLUSION_RADIUS, GRID_SAFETY,
    TERMINAL_LP_LAMBDA, TERMINAL_RECHECK_TOL,
};
use crate::tube::{
    l_theta, rho_at, w_tilde, BoundVariant, TubeGeometry, UncertaintyBound,
};

// ---------------------------------------------------------------------------
// Sampling lattice
// ---------------------------------------------------------------------------

/// Resolution of the deterministic measurement lattice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    /// Points per state dimension for tube centers `z`.
    pub nz: usize,
    /// Points per input dimension for nominal inputs `v`.
    pub nv: usize,
    /// Number of displacement directions.
    pub ndirs: usize,
    /// Displacement radii as fractions of the local admissible radius.
    pub radii: Vec<f64>,
    /// Multiplicative inflation applied to every grid supremum.
    pub safety: f64,
    /// Upper bound on the total number of lattice points; construction
    /// panics beyond it to catch runaway configurations.
    pub max_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nz: 3,
            nv: 9,
            ndirs: 64,
            radii: vec![0.1, 0.5, 1.0],
            safety: GRID_SAFETY,
            max_points: 2_000_000,
        }
    }
}

/// One admissible sample of the incremental-regulation domain: a tube
/// center `(z, v)`, a displaced state `x` at distance `radius` along
/// direction `dir_index`, and the fed-back input `u = v + K(z,v)(x - z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiSample {
    pub z: DVector<f64>,
    pub v: DVector<f64>,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub dir_index: usize,
    pub radius_mult: f64,
    pub radius: f64,
}

/// Argmax record of a grid supremum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiProbe {
    pub sample: PsiSample,
    pub num: f64,
    pub den: f64,
}

/// Result of a grid ratio maximization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMax {
    pub value: f64,
    pub probe: Option<PsiProbe>,
}

/// Domain description for the sampling lattice.
pub struct PsiGrid<'a> {
    pub p: &'a DMatrix<f64>,
    pub k_coeffs: &'a [DMatrix<f64>],
    pub box_hint: &'a BoxHint,
    pub x_radius: f64,
    pub spec: &'a GridSpec,
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

/// Euclidean-unit directions whose angles are uniform in the `P` metric:
/// `d_i = L^-T (cos phi_i, sin phi_i)` normalized, with `P = L L^T`.
/// For dimensions other than two, falls back to the signed coordinate
/// axes (a coarse but deterministic cover).
pub fn p_dirs(p: &DMatrix<f64>, ndirs: usize) -> Vec<DVector<f64>> {
    let n = p.nrows();
    if n == 2 {
        let chol = Cholesky::new(p.clone()).expect("P must be positive definite");
        let lt = chol.l().transpose();
        (0..ndirs)
            .map(|i| {
                let ang = 2.0 * std::f64::consts::PI * i as f64 / ndirs as f64;
                let rhs = DVector::from_vec(vec![ang.cos(), ang.sin()]);
                let d = lt.solve_upper_triangular(&rhs).expect("triangular solve");
                let norm = d.norm();
                d / norm
            })
            .collect()
    } else {
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut d = DVector::zeros(n);
                d[i] = sign;
                out.push(d);
            }
        }
        out
    }
}

/// Visits every admissible lattice sample in a fixed deterministic order.
///
/// The local displacement radius at a center `(z, v)` is
/// `min(x_radius, state room, input room / |K|)`; centers without room and
/// displaced points that leave the state/input boxes (after feedback) are
/// skipped.
pub fn for_each_psi_sample(grid: &PsiGrid, mut visit: impl FnMut(&PsiSample)) {
    let bh = grid.box_hint;
    let n = bh.x_lo.len();
    let m = bh.u_lo.len();
    let spec = grid.spec;
    let dirs = p_dirs(grid.p, spec.ndirs);
    let z_axes: Vec<Vec<f64>> = (0..n).map(|i| linspace(bh.x_lo[i], bh.x_hi[i], spec.nz)).collect();
    let v_axes: Vec<Vec<f64>> = (0..m).map(|j| linspace(bh.u_lo[j], bh.u_hi[j], spec.nv)).collect();
    let total = spec.nz.pow(n as u32) * spec.nv.pow(m as u32) * dirs.len() * spec.radii.len();
    assert!(total <= spec.max_points, "lattice of {total} points exceeds the configured budget");

    let mut zi = vec![0usize; n];
    loop {
        let z = DVector::from_fn(n, |i, _| z_axes[i][zi[i]]);
        let room_x = (0..n)
            .map(|i| (z[i] - bh.x_lo[i]).min(bh.x_hi[i] - z[i]))
            .fold(f64::INFINITY, f64::min);
        if room_x > 0.0 {
            let mut vi = vec![0usize; m];
            loop {
                let v = DVector::from_fn(m, |j, _| v_axes[j][vi[j]]);
                let k = crate::tube::k_eval(grid.k_coeffs, &z, &v, m, n);
                let nk = k.clone().svd(false, false).singular_values.max().max(1e-12);
                let room_k = (0..m)
                    .map(|j| (v[j] - bh.u_lo[j]).min(bh.u_hi[j] - v[j]))
                    .fold(f64::INFINITY, f64::min)
                    / nk;
                let r_max = grid.x_radius.min(room_x).min(room_k);
                if r_max > 1e-8 {
                    for (dir_index, d) in dirs.iter().enumerate() {
                        for &rm in &spec.radii {
                            let r = rm * r_max;
                            if r < 1e-8 {
                                continue;
                            }
                            let x = &z + d * r;
                            let in_x = (0..n)
                                .all(|i| x[i] >= bh.x_lo[i] - 1e-12 && x[i] <= bh.x_hi[i] + 1e-12);
                            if !in_x {
                                continue;
                            }
                            let u = &v + &k * (&x - &z);
                            let in_u = (0..m)
                                .all(|j| u[j] >= bh.u_lo[j] - 1e-12 && u[j] <= bh.u_hi[j] + 1e-12);
                            if !in_u {
                                continue;
                            }
                            visit(&PsiSample {
                                z: z.clone(),
                                v: v.clone(),
                                x,
                                u,
                                dir_index,
                                radius_mult: rm,
                                radius: r,
                            });
                        }
                    }
                }
                if !odometer(&mut vi, spec.nv) {
                    break;
                }
            }
        }
        if !odometer(&mut zi, spec.nz) {
            break;
        }
    }
}

/// Advances a mixed-radix counter; returns `false` on wraparound (an empty
/// counter has a single state, so it wraps immediately).
fn odometer(idx: &mut [usize], base: usize) -> bool {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < base {
            return true;
        }
        idx[d] = 0;
    }
    false
}

/// Maximizes `numerator(s) / denominator(s)` over the lattice, skipping
/// samples whose denominator is at most `exclusion_radius`. Returns 0 with
/// no probe when no sample qualifies.
pub fn grid_max_ratio(
    grid: &PsiGrid,
    numerator: impl Fn(&PsiSample) -> f64,
    denominator: impl Fn(&PsiSample) -> f64,
    exclusion_radius: f64,
) -> GridMax {
    let mut best = GridMax { value: 0.0, probe: None };
    for_each_psi_sample(grid, |s| {
        let den = denominator(s);
        if den <= exclusion_radius {
            return;
        }
        let num = numerator(s);
        let ratio = num / den;
        if ratio > best.value {
            best.value = ratio;
            best.probe = Some(PsiProbe { sample: s.clone(), num, den });
        }
    });
    best
}

// ---------------------------------------------------------------------------
// Design constants
// ---------------------------------------------------------------------------

/// Raw grid measurements plus exact quantities, with enough provenance to
/// rebuild every tube geometry variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignConstants {
    /// Tube metric.
    pub p: DMatrix<f64>,
    /// Feedback coefficients (see [`crate::tube::feature_vector`]).
    pub k_coeffs: Vec<DMatrix<f64>>,
    /// Euclidean radius limiting local displacements.
    pub x_radius: f64,
    pub theta_bar0: DVector<f64>,
    pub eta0: f64,
    pub safety: f64,

    pub rho_raw: f64,
    pub rho_probe: Option<PsiProbe>,
    pub l_brho_raw: f64,
    pub l_b_raw: f64,
    pub c_j_raw: Vec<f64>,
    pub kappa_max_raw: f64,
    pub l_f_raw: f64,
    pub l_g_raw: f64,
    pub c_j_lip_raw: Vec<f64>,

    pub c_delta_l: f64,
    pub c_delta_u: f64,
    pub delta_loc: f64,
    /// `max |E d|_P` over the disturbance box (exact corner enumeration).
    pub d_bar_p: f64,
    /// Same bound in the Euclidean norm (Lipschitz variant frame).
    pub d_bar_euclid: f64,
    /// Parameter-ball radius `|theta_bar0|_2 + sqrt(p) eta0` entering the
    /// Lipschitz contraction constant.
    pub pi_ball: f64,

    /// Worst-case `rho + L` per variant (must be below one for a bounded
    /// tube; flagged, not fatal).
    pub rho_plus_l_vertex: f64,
    pub rho_plus_l_normball: f64,
    pub rho_plus_l_lipschitz: f64,
}

impl DesignConstants {
    pub fn contraction_ok(&self, variant: BoundVariant) -> bool {
        self.rho_plus_l(variant) < 1.0
    }

    pub fn rho_plus_l(&self, variant: BoundVariant) -> f64 {
        match variant {
            BoundVariant::Vertex => self.rho_plus_l_vertex,
            BoundVariant::NormBall => self.rho_plus_l_normball,
            BoundVariant::LipschitzBall => self.rho_plus_l_lipschitz,
        }
    }

    /// Instantiates the tube geometry for a variant.
    pub fn geometry(&self, variant: BoundVariant) -> TubeGeometry {
        let s = self.safety;
        match variant {
            BoundVariant::Vertex | BoundVariant::NormBall => TubeGeometry {
                p: self.p.clone(),
                k_coeffs: self.k_coeffs.clone(),
                c_delta_l: self.c_delta_l,
                c_delta_u: self.c_delta_u,
                kappa_max: s * self.kappa_max_raw,
                delta_loc: self.delta_loc,
                rho_base: s * self.rho_raw,
                l_brho: s * self.l_brho_raw,
                c: self.c_j_raw.iter().map(|v| s * v).collect(),
            },
            BoundVariant::LipschitzBall => {
                let n = self.p.nrows();
                TubeGeometry {
                    p: DMatrix::identity(n, n),
                    k_coeffs: Vec::new(),
                    c_delta_l: 1.0,
                    c_delta_u: 1.0,
                    kappa_max: 0.0,
                    delta_loc: f64::INFINITY,
                    rho_base: s * self.l_f_raw + s * self.l_g_raw * self.pi_ball,
                    l_brho: 0.0,
                    c: self.c_j_lip_raw.iter().map(|v| s * v).collect(),
                }
            }
        }
    }

    /// Instantiates the uncertainty bound for a variant.
    pub fn bound(&self, variant: BoundVariant) -> UncertaintyBound {
        let p_dim = self.theta_bar0.len();
        let s = self.safety;
        UncertaintyBound {
            variant,
            vertices: if variant == BoundVariant::Vertex {
                UncertaintyBound::half_vertices(p_dim)
            } else {
                Vec::new()
            },
            c_b: (p_dim as f64).sqrt(),
            l_b: s * self.l_b_raw,
            l_f: s * self.l_f_raw,
            l_g: s * self.l_g_raw,
            d_bar: match variant {
                BoundVariant::LipschitzBall => self.d_bar_euclid,
                _ => self.d_bar_p,
            },
        }
    }
}

/// Measures every grid constant in one deterministic sweep and assembles
/// the exact quantities around them.
pub fn compute_constants(
    model: &ParamAffineModel,
    constraints: &ConstraintSet,
    p: &DMatrix<f64>,
    k_coeffs: &[DMatrix<f64>],
    x_radius: f64,
    theta0: &HypercubeSet,
    grid: &GridSpec,
) -> DesignConstants {
    let bh = &constraints.box_hint;
    let r = constraints.r();
    let theta_bar0 = theta0.center.clone();
    let eta0 = theta0.radius;
    let p_dim = model.p;

    let chol = Cholesky::new(p.clone()).expect("P must be positive definite");
    let l_lower = chol.l();
    let p_norm = |d: &DVector<f64>| -> f64 { (d.transpose() * p * d)[(0, 0)].max(0.0).sqrt() };

    let half_verts = UncertaintyBound::half_vertices(p_dim);

    // ---- fused sweep over the feedback lattice -------------------------
    let psi = PsiGrid { p, k_coeffs, box_hint: bh, x_radius, spec: grid };
    let mut rho_raw = 0.0f64;
    let mut rho_probe: Option<PsiProbe> = None;
    let mut l_brho_raw = 0.0f64;
    let mut l_b_raw = 0.0f64;
    let mut c_j_raw = vec![0.0f64; r];
    for_each_psi_sample(&psi, |s| {
        let den = p_norm(&(&s.x - &s.z));
        if den <= GRID_EXCLUSION_RADIUS {
            return;
        }
        let fx = model.eval_f_theta(&s.x, &s.u, &theta_bar0);
        let fz = model.eval_f_theta(&s.z, &s.v, &theta_bar0);
        let num = p_norm(&(fx - fz));
        if num / den > rho_raw {
            rho_raw = num / den;
            rho_probe = Some(PsiProbe { sample: s.clone(), num, den });
        }
        let gx = model.eval_g(&s.x, &s.u);
        let gz = model.eval_g(&s.z, &s.v);
        let dg = gx - gz;
        for vert in &half_verts {
            let val = p_norm(&(&dg * vert)) / den;
            if val > l_brho_raw {
                l_brho_raw = val;
            }
        }
        let ltdg = l_lower.transpose() * &dg;
        let sv = ltdg.svd(false, false).singular_values.max();
        let val = (p_dim as f64).sqrt() * sv / den;
        if val > l_b_raw {
            l_b_raw = val;
        }
        let hx = constraints.eval(&s.x, &s.u);
        let hz = constraints.eval(&s.z, &s.v);
        for j in 0..r {
            let val = (hx[j] - hz[j]) / den;
            if val > c_j_raw[j] {
                c_j_raw[j] = val;
            }
        }
    });

    // ---- gain cap over the (z, v) lattice -------------------------------
    let c_delta_l;
    let c_delta_u;
    {
        let eig = p.clone().symmetric_eigen().eigenvalues;
        c_delta_l = eig.min().max(0.0).sqrt();
        c_delta_u = eig.max().max(0.0).sqrt();
    }
    let mut kappa_max_raw = 0.0f64;
    {
        let n = model.n;
        let m = model.m;
        let z_axes: Vec<Vec<f64>> = (0..n).map(|i| linspace(bh.x_lo[i], bh.x_hi[i], grid.nz)).collect();
        let v_axes: Vec<Vec<f64>> = (0..m).map(|j| linspace(bh.u_lo[j], bh.u_hi[j], grid.nv)).collect();
        let mut zi = vec![0usize; n];
        loop {
            let z = DVector::from_fn(n, |i, _| z_axes[i][zi[i]]);
            let mut vi = vec![0usize; m];
            loop {
                let v = DVector::from_fn(m, |j, _| v_axes[j][vi[j]]);
                let k = crate::tube::k_eval(k_coeffs, &z, &v, m, n);
                let sv = k.svd(false, false).singular_values.max();
                kappa_max_raw = kappa_max_raw.max(sv / c_delta_l);
                if !odometer(&mut vi, grid.nv) {
                    break;
                }
            }
            if !odometer(&mut zi, grid.nz) {
                break;
            }
        }
    }

    // ---- Euclidean-frame global Lipschitz sweep -------------------------
    // Same lattice resolution, but: identity metric, zero feedback, radius
    // limited only by the state room (displacements stay in the box by
    // construction, so no membership filters are applied).
    let mut l_f_raw = 0.0f64;
    let mut l_g_raw = 0.0f64;
    let mut c_j_lip_raw = vec![0.0f64; r];
    {
        let n = model.n;
        let m = model.m;
        let dirs: Vec<DVector<f64>> = if n == 2 {
            (0..grid.ndirs)
                .map(|i| {
                    let ang = 2.0 * std::f64::consts::PI * i as f64 / grid.ndirs as f64;
                    DVector::from_vec(vec![ang.cos(), ang.sin()])
                })
                .collect()
        } else {
            p_dirs(&DMatrix::identity(n, n), grid.ndirs)
        };
        let z_axes: Vec<Vec<f64>> = (0..n).map(|i| linspace(bh.x_lo[i], bh.x_hi[i], grid.nz)).collect();
        let v_axes: Vec<Vec<f64>> = (0..m).map(|j| linspace(bh.u_lo[j], bh.u_hi[j], grid.nv)).collect();
        let mut zi = vec![0usize; n];
        loop {
            let z = DVector::from_fn(n, |i, _| z_axes[i][zi[i]]);
            let room = (0..n)
                .map(|i| (z[i] - bh.x_lo[i]).min(bh.x_hi[i] - z[i]))
                .fold(f64::INFINITY, f64::min);
            if room > 0.0 {
                let mut vi = vec![0usize; m];
                loop {
                    let v = DVector::from_fn(m, |j, _| v_axes[j][vi[j]]);
                    for d in &dirs {
                        for &rm in &grid.radii {
                            let r_disp = rm * room;
                            let x = &z + d * r_disp;
                            let den = (&x - &z).norm();
                            if den <= GRID_EXCLUSION_RADIUS {
                                continue;
                            }
                            let df = model.eval_f_theta(&x, &v, &theta_bar0)
                                - model.eval_f_theta(&z, &v, &theta_bar0);
                            l_f_raw = l_f_raw.max(df.norm() / den);
                            let dg = model.eval_g(&x, &v) - model.eval_g(&z, &v);
                            let sv = dg.svd(false, false).singular_values.max();
                            l_g_raw = l_g_raw.max(sv / den);
                            let hx = constraints.eval(&x, &v);
                            let hz = constraints.eval(&z, &v);
                            for j in 0..r {
                                let val = (hx[j] - hz[j]) / den;
                                if val > c_j_lip_raw[j] {
                                    c_j_lip_raw[j] = val;
                                }
                            }
                        }
                    }
                    if !odometer(&mut vi, grid.nv) {
                        break;
                    }
                }
            }
            if !odometer(&mut zi, grid.nz) {
                break;
            }
        }
    }

    // ---- exact quantities ------------------------------------------------
    let delta_loc = x_radius * c_delta_l;
    let (d_bar_p, d_bar_euclid) = {
        let q = model.q;
        let mut worst_p = 0.0f64;
        let mut worst_e = 0.0f64;
        for mask in 0..1usize << q {
            let d = DVector::from_fn(q, |i, _| {
                model.dist_radius * if mask >> i & 1 == 1 { 1.0 } else { -1.0 }
            });
            let ed = &model.e * d;
            worst_p = worst_p.max(p_norm(&ed));
            worst_e = worst_e.max(ed.norm());
        }
        (worst_p, worst_e)
    };
    let pi_ball = theta_bar0.norm() + (p_dim as f64).sqrt() * eta0;

    let s = grid.safety;
    let rho_plus_l_vertex = s * rho_raw + eta0 * s * l_brho_raw;
    let rho_plus_l_normball = s * rho_raw + eta0 * s * l_b_raw;
    let rho_plus_l_lipschitz = s * l_f_raw + s * l_g_raw * pi_ball;

    DesignConstants {
        p: p.clone(),
        k_coeffs: k_coeffs.to_vec(),
        x_radius,
        theta_bar0,
        eta0,
        safety: s,
        rho_raw,
        rho_probe,
        l_brho_raw,
        l_b_raw,
        c_j_raw,
        kappa_max_raw,
        l_f_raw,
        l_g_raw,
        c_j_lip_raw,
        c_delta_l,
        c_delta_u,
        delta_loc,
        d_bar_p,
        d_bar_euclid,
        pi_ball,
        rho_plus_l_vertex,
        rho_plus_l_normball,
        rho_plus_l_lipschitz,
    }
}

// ---------------------------------------------------------------------------
// Contraction verification
// ---------------------------------------------------------------------------

/// Location and size of a contraction-check extremum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionPoint {
    /// `lambda_max(P^-1 A_cl' P A_cl)`: squared one-step gain of the
    /// linearized closed loop in the tube metric.
    pub lambda: f64,
    pub z: DVector<f64>,
    pub v: DVector<f64>,
    pub theta: DVector<f64>,
}

/// Outcome of [`verify_contraction`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionReport {
    pub pass: bool,
    /// Worst admissible-lattice point, with `margin = lambda - allowance`
    /// (negative when passing; allowance excludes the tolerance).
    pub worst: ContractionPoint,
    pub worst_margin: f64,
    /// Worst point over the unfiltered lattice, including centers where no
    /// feedback room exists. Diagnostic only: the tube constants are not
    /// claimed there, so this does not gate `pass`.
    pub worst_full: ContractionPoint,
    pub tol: f64,
}

/// Jacobian-based audit of the measured contraction rate.
///
/// At every lattice point with positive state and input room (the same
/// admissibility rule the measurement lattice uses), and for the parameter
/// center plus all vertices, the squared gain of `A_theta + B_theta K` in
/// the `P` metric must stay below `(rho_tilde + |theta - center|_inf *
/// l_brho)^2 + tol`. The tolerance covers the tangent-versus-secant gap
/// between this linearized check and the sampled ratios that produced
/// `rho_tilde`.
#[allow(clippy::too_many_arguments)]
pub fn verify_contraction(
    model: &ParamAffineModel,
    p: &DMatrix<f64>,
    k_coeffs: &[DMatrix<f64>],
    box_hint: &BoxHint,
    theta0: &HypercubeSet,
    grid: &GridSpec,
    rho_tilde: f64,
    l_brho: f64,
    tol: Option<f64>,
) -> ContractionReport {
    let tol = tol.unwrap_or(CONTRACTION_CHECK_TOL);
    let n = model.n;
    let m = model.m;
    let chol = Cholesky::new(p.clone()).expect("P must be positive definite");
    let mut thetas = vec![theta0.center.clone()];
    thetas.extend(theta0.vertices());

    let lambda_at = |z: &DVector<f64>, v: &DVector<f64>, theta: &DVector<f64>| -> f64 {
        let (a, b) = model.jacobians(z, v, theta);
        let k = crate::tube::k_eval(k_coeffs, z, v, m, n);
        let a_cl = a + b * k;
        let mtx = a_cl.transpose() * p * a_cl;
        // lambda_max(M, P) via the Cholesky congruence L^-1 M L^-T.
        let li_m = chol.l().solve_lower_triangular(&mtx).expect("triangular solve");
        let li_m_lit = chol
            .l()
            .solve_lower_triangular(&li_m.transpose())
            .expect("triangular solve");
        let sym = (&li_m_lit + li_m_lit.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.max()
    };

    let z_axes: Vec<Vec<f64>> = (0..n).map(|i| linspace(box_hint.x_lo[i], box_hint.x_hi[i], grid.nz)).collect();
    let v_axes: Vec<Vec<f64>> = (0..m).map(|j| linspace(box_hint.u_lo[j], box_hint.u_hi[j], grid.nv)).collect();

    let mut worst: Option<ContractionPoint> = None;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_full: Option<ContractionPoint> = None;

    let mut zi = vec![0usize; n];
    loop {
        let z = DVector::from_fn(n, |i, _| z_axes[i][zi[i]]);
        let room_x = (0..n)
            .map(|i| (z[i] - box_hint.x_lo[i]).min(box_hint.x_hi[i] - z[i]))
            .fold(f64::INFINITY, f64::min);
        let mut vi = vec![0usize; m];
        loop {
            let v = DVector::from_fn(m, |j, _| v_axes[j][vi[j]]);
            let room_v = (0..m)
                .map(|j| (v[j] - box_hint.u_lo[j]).min(box_hint.u_hi[j] - v[j]))
                .fold(f64::INFINITY, f64::min);
            for theta in &thetas {
                let lam = lambda_at(&z, &v, theta);
                if worst_full.as_ref().map_or(true, |w| lam > w.lambda) {
                    worst_full = Some(ContractionPoint {
                        lambda: lam,
                        z: z.clone(),
                        v: v.clone(),
                        theta: theta.clone(),
                    });
                }
                if room_x > 0.0 && room_v > 0.0 {
                    let drift = (theta - &theta0.center).amax();
                    let allowance = (rho_tilde + drift * l_brho).powi(2);
                    let margin = lam - allowance;
                    if margin > worst_margin {
                        worst_margin = margin;
                        worst = Some(ContractionPoint {
                            lambda: lam,
                            z: z.clone(),
                            v: v.clone(),
                            theta: theta.clone(),
                        });
                    }
                }
            }
            if !odometer(&mut vi, grid.nv) {
                break;
            }
        }
        if !odometer(&mut zi, grid.nz) {
            break;
        }
    }

    let worst = worst.expect("admissible lattice is nonempty");
    let worst_full = worst_full.expect("lattice is nonempty");
    ContractionReport { pass: worst_margin <= tol, worst, worst_margin, worst_full, tol }
}

// ---------------------------------------------------------------------------
// Terminal ingredients
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(
        "steady state is not reproduced at every parameter vertex \
         (worst deviation {worst:.3e} > {tol:.1e})"
    )]
    NotEquilibrium { worst: f64, tol: f64 },
    #[error("steady state violates the pointwise constraints (margin {margin:.3e})")]
    SteadyStateInfeasible { margin: f64 },
    #[error(
        "contraction premise fails: measured {measured:.6} exceeds required {required:.6}; \
         headroom factor {headroom:.4}"
    )]
    NotContractive { measured: f64, required: f64, headroom: f64 },
    #[error("terminal synthesis program infeasible; binding row groups: {groups:?}")]
    SynthesisInfeasible { groups: Vec<String>, residual: f64 },
    #[error("synthesized ingredients failed re-verification (residual {residual:.3e})")]
    RecheckFailed { residual: f64 },
    #[error("numerical failure during design: {0}")]
    Numerical(String),
}

/// Terminal ingredients around a robust steady state: the equality-terminal
/// scheme with a `V_delta` ball of radius `c_xs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalSimple {
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
    /// Local feedback `K(x_s, u_s)` used as the terminal controller.
    pub k_local: DMatrix<f64>,
    /// Terminal ball radius in `V_delta`.
    pub c_xs: f64,
    /// Grid bound on `stage cost / V_delta^2` under the terminal controller.
    pub alpha: f64,
    /// Terminal cost is `cost_coeff * V_delta(x, x_s)^2`.
    pub cost_coeff: f64,
    /// Certified one-step contraction `rho + L_Theta` (worst case over the
    /// parameter-set family).
    pub contraction: f64,
    /// `(1 - contraction) * c_xs / w_tilde`: how many times larger the
    /// disturbance could be before the invariance margin vanishes.
    pub headroom: f64,
}

/// Terminal ingredients of the enlarged-set scheme: a control-Lyapunov
/// ellipsoid with parameter-dependent level `gamma_eta = gamma0 - eta *
/// gamma1` and tube cap `s_f_eta = sf0 + eta * sf1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalAlternative {
    pub p_f: DMatrix<f64>,
    pub k_f: DMatrix<f64>,
    pub rho_f: f64,
    pub rho_f_raw_measured: f64,
    pub gamma_bar: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub sf0: f64,
    pub sf1: f64,
    pub w_bar_b: f64,
    pub wb0: f64,
    pub wb_floor: f64,
    pub l_slope: f64,
    pub rho_bar: f64,
    pub rho_lower: f64,
    pub c_tilde_raw: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub l_tilde_raw: f64,
    pub l_tilde: f64,
    pub c_fdelta_raw: f64,
    pub c_fdelta: f64,
    pub c_fdelta_exact: f64,
    pub alpha_f_raw: f64,
    pub alpha_f: f64,
    /// Terminal cost is `cost_coeff * V_s(x)^2`.
    pub cost_coeff: f64,
    pub objective: f64,
    /// Horizon the synthesis program was solved for.
    pub n_hor: usize,
    pub recheck_vertex_residual: f64,
    pub recheck_interior_residual: f64,
}

impl TerminalAlternative {
    pub fn gamma_eta(&self, eta: f64) -> f64 {
        self.gamma0 - eta * self.gamma1
    }

    pub fn s_bar_f_eta(&self, eta: f64) -> f64 {
        self.sf0 + eta * self.sf1
    }

    /// Per-step cap on the tube increment, `d_bar + eta * w_bar_b`.
    pub fn w_cap(&self, d_bar: f64, eta: f64) -> f64 {
        d_bar + eta * self.w_bar_b
    }
}

/// Terminal constraint for region-of-attraction scans: contain the nominal
/// endpoint in a `P_f` ellipsoid with a tube margin,
/// `|x|_Pf + c_f * s <= gamma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EllipsoidContainment {
    pub p_f: DMatrix<f64>,
    pub k_f: DMatrix<f64>,
    pub gamma: f64,
    /// `sqrt(lambda_max(P_f, P))`: converts tube size into the `P_f` norm.
    pub c_f: f64,
}

/// Any of the three terminal schemes, as consumed by the controller.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TerminalIngredients {
    Simple(TerminalSimple),
    Alternative(TerminalAlternative),
    Ellipsoid(EllipsoidContainment),
}

/// Synthesizes the steady-state terminal ingredients.
///
/// Fails if the steady state is not an equilibrium at every parameter
/// vertex, or if the contraction-plus-disturbance budget exceeds one (the
/// error carries the measured value and the disturbance headroom).
#[allow(clippy::too_many_arguments)]
pub fn terminal_simple(
    model: &ParamAffineModel,
    constraints: &ConstraintSet,
    cost: &StageCost,
    consts: &DesignConstants,
    variant: BoundVariant,
    theta0: &HypercubeSet,
    x_s: &DVector<f64>,
    u_s: &DVector<f64>,
    grid: &GridSpec,
) -> Result<TerminalSimple, DesignError> {
    let geom = consts.geometry(variant);
    let bound = consts.bound(variant);
    let eta0 = theta0.radius;

    // Equilibrium premise at every parameter vertex.
    let mut worst_dev = 0.0f64;
    for theta in theta0.vertices() {
        let dev = (model.eval_f_theta(x_s, u_s, &theta) - x_s).amax();
        worst_dev = worst_dev.max(dev);
    }
    if worst_dev > EQUILIBRIUM_TOL {
        return Err(DesignError::NotEquilibrium { worst: worst_dev, tol: EQUILIBRIUM_TOL });
    }

    // Largest tube ball around the steady state inside the tightened set.
    let h_s = constraints.eval(x_s, u_s);
    let mut c_xs = geom.delta_loc;
    for (j, &cj) in geom.c.iter().enumerate() {
        if cj > CJ_ZERO_TOL {
            c_xs = c_xs.min(-h_s[j] / cj);
        }
    }
    if c_xs <= 0.0 {
        return Err(DesignError::SteadyStateInfeasible { margin: c_xs });
    }

    // Worst contraction-plus-sensitivity over the parameter-set family
    // (affine in eta, so the endpoints suffice).
    let contraction = (rho_at(&geom, 0.0, eta0) + l_theta(&bound, &geom, 0.0))
        .max(rho_at(&geom, eta0, eta0) + l_theta(&bound, &geom, eta0));
    let w_s = w_tilde(&bound, &geom, model, eta0, x_s, u_s, true);
    let lhs = contraction + w_s / c_xs;
    let headroom = (1.0 - contraction) * c_xs / w_s;
    if lhs > 1.0 {
        return Err(DesignError::NotContractive { measured: lhs, required: 1.0, headroom });
    }

    // Stage-cost gain over the terminal ball under the local controller.
    let k_local = geom.k_at(x_s, u_s);
    let dirs = p_dirs(&geom.p, grid.ndirs);
    let mut alpha_raw = 0.0f64;
    for d in &dirs {
        for ir in 1..=8usize {
            let r = c_xs * ir as f64 / 8.0;
            let x = x_s + d * r;
            let u = u_s + &k_local * (&x - x_s);
            let vd = geom.v_delta(&x, x_s);
            if vd <= GRID_EXCLUSION_RADIUS {
                continue;
            }
            alpha_raw = alpha_raw.max(cost.eval(&x, &u) / (vd * vd));
        }
    }
    let alpha = grid.safety * alpha_raw;
    let cost_coeff = alpha / (1.0 - contraction * contraction);

    Ok(TerminalSimple {
        x_s: x_s.clone(),
        u_s: u_s.clone(),
        k_local,
        c_xs,
        alpha,
        cost_coeff,
        contraction,
        headroom,
    })
}

/// Certified control-Lyapunov data for the enlarged terminal set, provided
/// by the offline design input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClfSpec {
    pub p_f: DMatrix<f64>,
    pub k_f: DMatrix<f64>,
    pub rho_f: f64,
    pub gamma_bar: f64,
}

/// `P_f`-metric directions that are exactly unit in the `P_f` norm.
fn pf_dirs(p_f: &DMatrix<f64>, ndirs: usize) -> Vec<DVector<f64>> {
    let n = p_f.nrows();
    if n == 2 {
        let chol = Cholesky::new(p_f.clone()).expect("P_f must be positive definite");
        let lt = chol.l().transpose();
        (0..ndirs)
            .map(|i| {
                let ang = 2.0 * std::f64::consts::PI * i as f64 / ndirs as f64;
                let rhs = DVector::from_vec(vec![ang.cos(), ang.sin()]);
                lt.solve_upper_triangular(&rhs).expect("triangular solve")
            })
            .collect()
    } else {
        // Axis directions normalized to unit P_f length.
        let mut out = Vec::new();
        for i in 0..n {
            for sign in [1.0f64, -1.0] {
                let mut d = DVector::zeros(n);
                d[i] = sign;
                let norm = (d.transpose() * p_f * &d)[(0, 0)].sqrt();
                out.push(d / norm);
            }
        }
        out
    }
}

/// Row families of the terminal synthesis program, used to label binding
/// groups when it is infeasible.
const GROUP_TIGHTENING: &str = "constraint tightening over the terminal set";
const GROUP_REGION_SHRINK: &str = "terminal region recursion under set shrinkage";
const GROUP_TUBE_RECURSION: &str = "terminal tube-cap recursion";
const GROUP_CAP_CONSISTENCY: &str = "disturbance cap consistency";
const GROUP_TUBE_LOCALITY: &str = "terminal tube cap within the locality radius";
const GROUP_REGION_CAP: &str = "terminal region within the certified level set";
const GROUP_CAP_SHRINK: &str = "tube-cap consistency under set shrinkage";
const GROUP_CAP_FLOOR: &str = "disturbance cap floor";

/// Synthesizes the enlarged-terminal-set ingredients for one uncertainty
/// variant by measuring the control-Lyapunov grid constants and solving a
/// linear program over `(gamma0, gamma1, sf0, sf1, w_bar_b) >= 0`.
#[allow(clippy::too_many_arguments)]
pub fn terminal_alternative(
    model: &ParamAffineModel,
    constraints: &ConstraintSet,
    cost: &StageCost,
    consts: &DesignConstants,
    variant: BoundVariant,
    clf: &ClfSpec,
    theta0: &HypercubeSet,
    n_hor: usize,
    grid: &GridSpec,
) -> Result<TerminalAlternative, DesignError> {
    let geom = consts.geometry(variant);
    let bound = consts.bound(variant);
    let eta0 = theta0.radius;
    let safety = grid.safety;
    let r = constraints.r();
    let l_slope = match variant {
        BoundVariant::Vertex => geom.l_brho,
        BoundVariant::NormBall => bound.l_b,
        BoundVariant::LipschitzBall => {
            return Err(DesignError::Numerical(
                "the enlarged terminal set requires a contractive tube; the Lipschitz \
                 variant's contraction constant exceeds one"
                    .into(),
            ))
        }
    };
    let rho_bar = geom.rho_base + eta0 * l_slope;
    let rho_lower = consts.rho_raw - eta0 * safety * consts.l_brho_raw;
    if rho_bar >= 1.0 {
        return Err(DesignError::NotContractive {
            measured: rho_bar,
            required: 1.0,
            headroom: f64::NAN,
        });
    }
    let d_bar = bound.d_bar;
    let delta_loc = geom.delta_loc;

    let pf_norm = |x: &DVector<f64>| -> f64 { (x.transpose() * &clf.p_f * x)[(0, 0)].max(0.0).sqrt() };
    // Per-unit-eta parametric disturbance bound under the terminal gain.
    let wb_at = |x: &DVector<f64>| -> f64 {
        let u = &clf.k_f * x;
        w_tilde(&bound, &geom, model, 1.0, x, &u, false)
    };
    let wb0 = wb_at(&DVector::zeros(model.n));
    let h00 = constraints.eval(&DVector::zeros(model.n), &DVector::zeros(model.m));

    // ---- grid sups over the certified level set -------------------------
    let mut rho_f_raw = 0.0f64;
    let mut c_tilde_raw = vec![0.0f64; r];
    let mut l_tilde_raw = 0.0f64;
    let mut alpha_f_raw = 0.0f64;
    let theta_verts = theta0.vertices();
    for d in pf_dirs(&clf.p_f, grid.ndirs) {
        for ir in 1..=8usize {
            let vs = clf.gamma_bar * ir as f64 / 8.0;
            let x = &d * vs;
            let u = &clf.k_f * &x;
            for theta in &theta_verts {
                let next = model.eval_f_theta(&x, &u, theta);
                rho_f_raw = rho_f_raw.max(pf_norm(&next) / vs);
            }
            let h = constraints.eval(&x, &u);
            for j in 0..r {
                let val = (h[j] - h00[j]) / vs;
                if val > c_tilde_raw[j] {
                    c_tilde_raw[j] = val;
                }
            }
            l_tilde_raw = l_tilde_raw.max((wb_at(&x) - wb0) / vs);
            alpha_f_raw = alpha_f_raw.max(cost.eval(&x, &u) / (vs * vs));
        }
    }
    let rho_f_measured_safe = safety * rho_f_raw;
    if rho_f_measured_safe > clf.rho_f + 1e-9 {
        return Err(DesignError::NotContractive {
            measured: rho_f_measured_safe,
            required: clf.rho_f,
            headroom: clf.rho_f / rho_f_measured_safe,
        });
    }
    let rho_f = clf.rho_f;
    if rho_f >= 1.0 {
        return Err(DesignError::NotContractive {
            measured: rho_f,
            required: 1.0,
            headroom: f64::NAN,
        });
    }

    // Tube-to-terminal norm conversion: grid value plus exact cross-check.
    let mut c_fdelta_raw = 0.0f64;
    for d in p_dirs(&geom.p, grid.ndirs) {
        let num = pf_norm(&d);
        let den = geom.p_norm(&d);
        c_fdelta_raw = c_fdelta_raw.max(num / den);
    }
    let chol_p = Cholesky::new(geom.p.clone()).expect("P positive definite");
    let c_fdelta_exact = {
        let li_m = chol_p.l().solve_lower_triangular(&clf.p_f).expect("solve");
        let li_m_lit = chol_p.l().solve_lower_triangular(&li_m.transpose()).expect("solve");
        let sym = (&li_m_lit + li_m_lit.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.max().max(0.0).sqrt()
    };

    // Disturbance-cap floor: box-corner maximum of the per-unit-eta bound
    // plus the slope allowance over the locality radius. Makes the online
    // per-step cap vacuous on the constraint box (exact for multiaffine G).
    let bh = &constraints.box_hint;
    let mut wb_corner = 0.0f64;
    for mask in 0..1usize << model.n {
        let x = DVector::from_fn(model.n, |i, _| {
            if mask >> i & 1 == 1 {
                bh.x_hi[i]
            } else {
                bh.x_lo[i]
            }
        });
        wb_corner = wb_corner.max(wb_at(&x));
    }
    let wb_floor = wb_corner + l_slope * delta_loc;

    let c_tilde: Vec<f64> = c_tilde_raw.iter().map(|v| safety * v).collect();
    let l_tilde = safety * l_tilde_raw;
    let c_fdelta = safety * c_fdelta_raw;
    let alpha_f = safety * alpha_f_raw;
    let c_j: Vec<f64> = geom.c.clone();

    // ---- synthesis linear program ---------------------------------------
    let geom_series = |rho: f64, n: usize| -> f64 { (0..n).map(|k| rho.powi(k as i32)).sum() };
    let s_n = geom_series(rho_bar, n_hor);
    let rb_n = rho_bar.powi(n_hor as i32);
    let rl_n = rho_lower.powi(n_hor as i32);
    let rat_n = (rho_lower / rho_bar).powi(n_hor as i32);

    let mut rows_a: Vec<[f64; 5]> = Vec::new();
    let mut rows_b: Vec<f64> = Vec::new();
    let mut groups: Vec<&'static str> = Vec::new();
    let omega_verts = [(0.0, 0.0), (eta0, 0.0), (eta0, eta0)];
    for &(eta, deta) in &omega_verts {
        for j in 0..r {
            rows_a.push([c_tilde[j], -eta * c_tilde[j], c_j[j], eta * c_j[j], 0.0]);
            rows_b.push(-h00[j]);
            groups.push(GROUP_TIGHTENING);
        }
        rows_a.push([
            rho_f - 1.0,
            -eta * (rho_f - 1.0) - deta,
            0.0,
            0.0,
            c_fdelta * rb_n * eta + deta * c_fdelta * s_n,
        ]);
        rows_b.push(-c_fdelta * rb_n * d_bar);
        groups.push(GROUP_REGION_SHRINK);
        rows_a.push([eta * l_tilde, 0.0, rho_bar - 1.0, eta * (rho_bar - 1.0), 0.0]);
        rows_b.push((rl_n - 1.0) * d_bar - eta * wb0);
        groups.push(GROUP_TUBE_RECURSION);
        rows_a.push([l_tilde, -eta * l_tilde, l_slope, eta * l_slope, -1.0]);
        rows_b.push(-wb0);
        groups.push(GROUP_CAP_CONSISTENCY);
    }
    rows_a.push([0.0, 0.0, 1.0, eta0, 0.0]);
    rows_b.push(delta_loc);
    groups.push(GROUP_TUBE_LOCALITY);
    rows_a.push([1.0, 0.0, 0.0, 0.0, 0.0]);
    rows_b.push(clf.gamma_bar);
    groups.push(GROUP_REGION_CAP);
    rows_a.push([0.0, 0.0, -rat_n, eta0, 0.0]);
    rows_b.push(-rat_n * d_bar * s_n);
    groups.push(GROUP_CAP_SHRINK);
    rows_a.push([0.0, 0.0, 0.0, 0.0, -1.0]);
    rows_b.push(-wb_floor);
    groups.push(GROUP_CAP_FLOOR);

    let n_rows = rows_a.len();
    let a = DMatrix::from_fn(n_rows, 5, |i, j| rows_a[i][j]);
    let b = DVector::from_fn(n_rows, |i, _| rows_b[i]);
    let lam = TERMINAL_LP_LAMBDA;
    let c_obj = DVector::from_vec(vec![-1.0, eta0, -lam, -lam * eta0, 0.0]);
    let lp = LinearProgram {
        c: c_obj,
        a_ineq: a.clone(),
        b_ineq: b.clone(),
        a_eq: DMatrix::zeros(0, 5),
        b_eq: DVector::zeros(0),
        bounds: vec![(0.0, f64::INFINITY); 5],
    };
    let rep = lp_solve(&lp);
    if rep.status != SolveStatus::Optimal {
        // Identify which row families block feasibility: drop one family at
        // a time and see whether the program becomes feasible.
        let mut blocking = Vec::new();
        for family in [
            GROUP_TIGHTENING,
            GROUP_REGION_SHRINK,
            GROUP_TUBE_RECURSION,
            GROUP_CAP_CONSISTENCY,
            GROUP_TUBE_LOCALITY,
            GROUP_REGION_CAP,
            GROUP_CAP_SHRINK,
            GROUP_CAP_FLOOR,
        ] {
            let keep: Vec<usize> = (0..n_rows).filter(|&i| groups[i] != family).collect();
            let a_sub = DMatrix::from_fn(keep.len(), 5, |i, j| a[(keep[i], j)]);
            let b_sub = DVector::from_fn(keep.len(), |i, _| b[keep[i]]);
            let sub = LinearProgram {
                c: DVector::zeros(5),
                a_ineq: a_sub,
                b_ineq: b_sub,
                a_eq: DMatrix::zeros(0, 5),
                b_eq: DVector::zeros(0),
                bounds: vec![(0.0, f64::INFINITY); 5],
            };
            if lp_solve(&sub).status == SolveStatus::Optimal {
                blocking.push(family.to_string());
            }
        }
        return Err(DesignError::SynthesisInfeasible {
            groups: blocking,
            residual: rep.max_violation,
        });
    }
    let xi = rep.solution;
    let (gamma0, gamma1, sf0, sf1, w_bar_b) = (xi[0], xi[1], xi[2], xi[3], xi[4]);

    // ---- re-verification -------------------------------------------------
    let residual_at = |eta: f64, deta: f64| -> f64 {
        let gam = gamma0 - eta * gamma1;
        let sf = sf0 + eta * sf1;
        let mut worst = f64::NEG_INFINITY;
        for j in 0..r {
            worst = worst.max(h00[j] + c_j[j] * sf + c_tilde[j] * gam);
        }
        worst = worst.max(
            (rho_f - 1.0) * gam + c_fdelta * rb_n * (d_bar + eta * w_bar_b)
                - deta * (gamma1 - c_fdelta * w_bar_b * s_n),
        );
        worst = worst
            .max((rho_bar - 1.0) * sf + eta * wb0 + eta * l_tilde * gamma0 - (rl_n - 1.0) * d_bar);
        worst = worst.max(wb0 + l_slope * sf + l_tilde * gam - w_bar_b);
        worst = worst.max(sf0 + eta0 * sf1 - delta_loc);
        worst = worst.max(gamma0 - clf.gamma_bar);
        worst = worst.max(eta0 * sf1 - rat_n * (sf0 - d_bar * s_n));
        worst
    };
    let recheck_vertex_residual = omega_verts
        .iter()
        .map(|&(e, de)| residual_at(e, de))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut recheck_interior_residual = f64::NEG_INFINITY;
    for ui in 0..10 {
        for vi in 0..10 {
            let eta = eta0 * (0.05 + 0.9 * ui as f64 / 9.0);
            let deta = eta * (0.05 + 0.9 * vi as f64 / 9.0);
            recheck_interior_residual = recheck_interior_residual.max(residual_at(eta, deta));
        }
    }
    let worst_recheck = recheck_vertex_residual.max(recheck_interior_residual);
    if worst_recheck > TERMINAL_RECHECK_TOL {
        return Err(DesignError::RecheckFailed { residual: worst_recheck });
    }

    Ok(TerminalAlternative {
        p_f: clf.p_f.clone(),
        k_f: clf.k_f.clone(),
        rho_f,
        rho_f_raw_measured: rho_f_raw,
        gamma_bar: clf.gamma_bar,
        gamma0,
        gamma1,
        sf0,
        sf1,
        w_bar_b,
        wb0,
        wb_floor,
        l_slope,
        rho_bar,
        rho_lower,
        c_tilde_raw,
        c_tilde,
        l_tilde_raw,
        l_tilde,
        c_fdelta_raw,
        c_fdelta,
        c_fdelta_exact,
        alpha_f_raw,
        alpha_f,
        cost_coeff: alpha_f / (1.0 - rho_f * rho_f),
        objective: -rep.objective,
        n_hor,
        recheck_vertex_residual,
        recheck_interior_residual,
    })
}

/// Builds the ellipsoid-containment terminal for region-of-attraction
/// scans: `c_f` is the exact norm-conversion factor from the tube metric of
/// `geom` into the `P_f` norm.
pub fn roa_terminal_constraint(
    p_f: &DMatrix<f64>,
    k_f: &DMatrix<f64>,
    gamma: f64,
    geom: &TubeGeometry,
) -> EllipsoidContainment {
    let chol = Cholesky::new(geom.p.clone()).expect("P positive definite");
    let li_m = chol.l().solve_lower_triangular(p_f).expect("solve");
    let li_m_lit = chol.l().solve_lower_triangular(&li_m.transpose()).expect("solve");
    let sym = (&li_m_lit + li_m_lit.transpose()) * 0.5;
    let c_f = sym.symmetric_eigen().eigenvalues.max().max(0.0).sqrt();
    EllipsoidContainment { p_f: p_f.clone(), k_f: k_f.clone(), gamma, c_f }
}

// ---------------------------------------------------------------------------
// Design input and artifact
// ---------------------------------------------------------------------------

/// Per-variant certified control-Lyapunov levels in the design input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClfVariantInput {
    pub rho_f: f64,
    pub gamma_bar: f64,
}

/// Terminal control-Lyapunov data provided by the offline design input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClfInput {
    pub p_f: Vec<Vec<f64>>,
    pub k_f: Vec<f64>,
    pub vertex: ClfVariantInput,
    pub normball: ClfVariantInput,
}

/// External design input: tube metric, feedback coefficients, locality
/// radius, and the terminal control-Lyapunov certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignInput {
    pub p: Vec<Vec<f64>>,
    pub k_coeffs: Vec<Vec<f64>>,
    pub x_radius: f64,
    pub clf: ClfInput,
}

impl DesignInput {
    pub fn from_json(text: &str) -> Result<Self, DesignError> {
        serde_json::from_str(text).map_err(|e| DesignError::Numerical(e.to_string()))
    }

    pub fn p_matrix(&self) -> DMatrix<f64> {
        let n = self.p.len();
        DMatrix::from_fn(n, n, |i, j| self.p[i][j])
    }

    /// Feedback coefficient matrices (`m x n`, row-major flattening).
    pub fn k_matrices(&self, n: usize, m: usize) -> Vec<DMatrix<f64>> {
        self.k_coeffs
            .iter()
            .map(|row| DMatrix::from_fn(m, n, |i, j| row[i * n + j]))
            .collect()
    }

    pub fn p_f_matrix(&self) -> DMatrix<f64> {
        let n = self.clf.p_f.len();
        DMatrix::from_fn(n, n, |i, j| self.clf.p_f[i][j])
    }

    pub fn k_f_matrix(&self, n: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |i, j| self.clf.k_f[i * n + j])
    }

    pub fn clf_spec(&self, variant: BoundVariant, n: usize, m: usize) -> ClfSpec {
        let v = match variant {
            BoundVariant::NormBall => &self.clf.normball,
            _ => &self.clf.vertex,
        };
        ClfSpec {
            p_f: self.p_f_matrix(),
            k_f: self.k_f_matrix(n, m),
            rho_f: v.rho_f,
            gamma_bar: v.gamma_bar,
        }
    }
}

/// Outcome wrapper for per-variant synthesis attempts in the artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOutcome<T> {
    pub ok: Option<T>,
    pub error: Option<String>,
}

impl<T> SynthOutcome<T> {
    pub fn from_result(r: Result<T, DesignError>) -> Self {
        match r {
            Ok(v) => SynthOutcome { ok: Some(v), error: None },
            Err(e) => SynthOutcome { ok: None, error: Some(e.to_string()) },
        }
    }

    pub fn certified(&self) -> bool {
        self.ok.is_some()
    }
}

/// Per-variant container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerVariant<T> {
    pub vertex: T,
    pub normball: T,
    pub lipschitz: T,
}

impl<T> PerVariant<T> {
    pub fn get(&self, variant: BoundVariant) -> &T {
        match variant {
            BoundVariant::Vertex => &self.vertex,
            BoundVariant::NormBall => &self.normball,
            BoundVariant::LipschitzBall => &self.lipschitz,
        }
    }
}

/// Complete offline design output: everything the online controller and the
/// experiment drivers need, serializable and bit-stable across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignArtifact {
    pub constants: DesignConstants,
    pub geometry: PerVariant<TubeGeometry>,
    pub bounds: PerVariant<UncertaintyBound>,
    pub contraction: ContractionReport,
    pub terminal_simple: PerVariant<SynthOutcome<TerminalSimple>>,
    pub terminal_alternative: PerVariant<SynthOutcome<TerminalAlternative>>,
    /// Ellipsoid terminal for region-of-attraction scans, per variant
    /// (shared level, per-variant norm conversion). Present when the
    /// enlarged-set synthesis certified a level for the reference variant.
    pub roa_terminal: Option<PerVariant<EllipsoidContainment>>,
}

impl DesignArtifact {
    /// At least one terminal ingredient set certified.
    pub fn any_certified(&self) -> bool {
        let s = &self.terminal_simple;
        let a = &self.terminal_alternative;
        s.vertex.certified()
            || s.normball.certified()
            || s.lipschitz.certified()
            || a.vertex.certified()
            || a.normball.certified()
            || a.lipschitz.certified()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DesignError> {
        serde_json::from_str(text).map_err(|e| DesignError::Numerical(e.to_string()))
    }
}

/// Runs the full offline pipeline: constants, contraction audit, and all
/// terminal syntheses.
pub fn run_design(
    model: &ParamAffineModel,
    constraints: &ConstraintSet,
    cost: &StageCost,
    theta0: &HypercubeSet,
    input: &DesignInput,
    grid: &GridSpec,
    n_hor: usize,
) -> DesignArtifact {
    let p = input.p_matrix();
    let k_coeffs = input.k_matrices(model.n, model.m);
    let consts =
        compute_constants(model, constraints, &p, &k_coeffs, input.x_radius, theta0, grid);

    let contraction = verify_contraction(
        model,
        &p,
        &k_coeffs,
        &constraints.box_hint,
        theta0,
        grid,
        consts.rho_raw,
        consts.l_brho_raw,
        None,
    );

    let x_s = DVector::zeros(model.n);
    let u_s = DVector::zeros(model.m);
    let simple = |variant| {
        SynthOutcome::from_result(terminal_simple(
            model,
            constraints,
            cost,
            &consts,
            variant,
            theta0,
            &x_s,
            &u_s,
            grid,
        ))
    };
    let terminal_simple_out = PerVariant {
        vertex: simple(BoundVariant::Vertex),
        normball: simple(BoundVariant::NormBall),
        lipschitz: simple(BoundVariant::LipschitzBall),
    };

    let alt = |variant| {
        let clf = input.clf_spec(variant, model.n, model.m);
        SynthOutcome::from_result(terminal_alternative(
            model,
            constraints,
            cost,
            &consts,
            variant,
            &clf,
            theta0,
            n_hor,
            grid,
        ))
    };
    let terminal_alternative_out = PerVariant {
        vertex: alt(BoundVariant::Vertex),
        normball: alt(BoundVariant::NormBall),
        lipschitz: alt(BoundVariant::LipschitzBall),
    };

    // Region-of-attraction terminal: shared level from the reference
    // (vertex) enlarged-set synthesis, converted per variant.
    let roa_terminal = terminal_alternative_out.vertex.ok.as_ref().map(|ta| {
        let gamma = ta.gamma_eta(theta0.radius);
        let make = |variant| {
            roa_terminal_constraint(&ta.p_f, &ta.k_f, gamma, &consts.geometry(variant))
        };
        PerVariant {
            vertex: make(BoundVariant::Vertex),
            normball: make(BoundVariant::NormBall),
            lipschitz: make(BoundVariant::LipschitzBall),
        }
    });

    DesignArtifact {
        geometry: PerVariant {
            vertex: consts.geometry(BoundVariant::Vertex),
            normball: consts.geometry(BoundVariant::NormBall),
            lipschitz: consts.geometry(BoundVariant::LipschitzBall),
        },
        bounds: PerVariant {
            vertex: consts.bound(BoundVariant::Vertex),
            normball: consts.bound(BoundVariant::NormBall),
            lipschitz: consts.bound(BoundVariant::LipschitzBall),
        },
        constants: consts,
        contraction,
        terminal_simple: terminal_simple_out,
        terminal_alternative: terminal_alternative_out,
        roa_terminal,
    }
}
