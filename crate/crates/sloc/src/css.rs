//! Canonical steady states: 0D roots, Newton for the distributed stationary
//! system, pseudo-arclength continuation in the degradation rate `b`,
//! bifurcation detection with branch switching onto patterned branches, and
//! the analytic dispersion relation for the flat states.

use crate::cansys::{CanonicalState, SystemOps};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, PointState};
use crate::spectral::{self, SpectrumReport};
use ndarray::{Array1, Array2};
use ndarray_linalg::{Determinant, Solve};
use num_complex::Complex64;

/// A converged canonical steady state with its characteristic values.
/// `defect` and `spectrum` are filled on demand by the spectral module.
#[derive(Debug, Clone)]
pub struct CssRecord {
    pub state: CanonicalState,
    pub b: f64,
    pub kind: CssKind,
    pub avg_p: f64,
    pub avg_k: f64,
    pub norm_p: f64,
    /// Stationary objective value `J_ca(uhat) / r`.
    pub j_value: f64,
    pub defect: Option<i32>,
    pub spectrum: Option<SpectrumReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CssKind {
    Flat,
    Patterned,
}

impl CssRecord {
    /// Characteristic values of a converged state.
    pub fn characterize(state: CanonicalState, sys: &SystemOps, b: f64) -> Result<Self> {
        state.check_admissible()?;
        let pr = sys.params.with_b(b);
        let p = state.p().to_owned();
        let k = state.control()?;
        let avg_p = sys.fem.avg(p.view());
        let avg_k = sys.fem.avg(k.view());
        let norm_p = sys.fem.normalized_l2(p.view());
        let mut jc = Array1::zeros(state.n());
        for i in 0..state.n() {
            jc[i] = model::current_objective(p[i], k[i], &pr)?;
        }
        let j_value = sys.fem.avg(jc.view()) / pr.r;
        let dev = sys.fem.normalized_l2((&p - avg_p).view());
        let qdev = {
            let q = state.q().to_owned();
            let avg_q = sys.fem.avg(q.view());
            sys.fem.normalized_l2((&q - avg_q).view())
        };
        let kind = if dev <= 1e-6 * (1.0 + norm_p) && qdev <= 1e-6 * (1.0 + norm_p) {
            CssKind::Flat
        } else {
            CssKind::Patterned
        };
        Ok(Self { state, b, kind, avg_p, avg_k, norm_p, j_value, defect: None, spectrum: None })
    }
}

/// Computes and stores the spectrum and defect of a record.
pub fn fill_spectrum<'a>(
    css: &'a mut CssRecord,
    sys: &SystemOps,
    center_tol: f64,
) -> Result<&'a SpectrumReport> {
    if css.spectrum.is_none() {
        let rep = spectral::spectrum(&css.state, sys, css.b, center_tol)?;
        css.defect = Some(rep.defect);
        css.spectrum = Some(rep);
    }
    Ok(css.spectrum.as_ref().unwrap())
}

// ---------------------------------------------------------------------------
// 0D canonical steady states
// ---------------------------------------------------------------------------

/// Costate solving the stationary costate equation at a given `P`.
fn stationary_costate(p: f64, pr: &ModelParams) -> f64 {
    -2.0 * pr.gamma * p / (pr.r + pr.b - model::recycling_d1(p))
}

/// Scalar stationarity residual: `-1/qhat(P) - (bP - g(P))`.
fn stationary_residual(p: f64, pr: &ModelParams) -> f64 {
    (pr.r + pr.b - model::recycling_d1(p)) / (2.0 * pr.gamma * p) - (pr.b * p - model::recycling(p))
}

/// All 0D canonical steady states with `qhat < 0`, found by sign-change
/// bisection of the combined stationarity residual over `P in (0, 3]`.
pub fn fcss_roots(params: &ModelParams) -> Vec<PointState> {
    const SAMPLES: usize = 3000;
    const P_MAX: f64 = 3.0;
    let mut roots: Vec<PointState> = Vec::new();
    let sample = |i: usize| P_MAX * i as f64 / SAMPLES as f64;
    let mut prev_p = sample(1);
    let mut prev_r = stationary_residual(prev_p, params);
    for i in 2..=SAMPLES {
        let p = sample(i);
        let r = stationary_residual(p, params);
        if prev_r == 0.0 || prev_r * r < 0.0 {
            let (mut lo, mut hi) = (prev_p, p);
            let mut rlo = prev_r;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let rm = stationary_residual(mid, params);
                if rlo * rm <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    rlo = rm;
                }
            }
            let phat = 0.5 * (lo + hi);
            let qhat = stationary_costate(phat, params);
            if qhat < 0.0 && roots.iter().all(|r| (r.p - phat).abs() > 1e-8) {
                roots.push(PointState { p: phat, q: qhat });
            }
        }
        prev_p = p;
        prev_r = r;
    }
    roots.sort_by(|a, b| a.p.total_cmp(&b.p));
    roots
}

/// Parameter value where the root count of the flat family changes between
/// three and one (birth of the FSI/FSC pair), bisected to 1e-4.
pub fn fold_locate(params: &ModelParams, b_lo: f64, b_hi: f64) -> Result<f64> {
    let count = |b: f64| fcss_roots(&params.with_b(b)).len();
    let (clo, chi) = (count(b_lo), count(b_hi));
    if clo == chi {
        return Err(Error::InvalidInput(format!(
            "root count does not change over [{b_lo}, {b_hi}] (both {clo})"
        )));
    }
    let (mut lo, mut hi) = (b_lo, b_hi);
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if count(mid) == chi {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Flat branch selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlatBranch {
    Clean,
    Intermediate,
    Muddy,
}

/// The requested flat CSS at `b`, polished on the mesh.
pub fn flat_css(which: FlatBranch, sys: &SystemOps, b: f64, newton_tol: f64) -> Result<CssRecord> {
    let roots = fcss_roots(&sys.params.with_b(b));
    let point = match (roots.len(), which) {
        (1, FlatBranch::Muddy) => roots[0],
        (1, _) => {
            return Err(Error::InvalidInput(format!(
                "only the muddy flat state exists at b = {b}"
            )))
        }
        (3, FlatBranch::Clean) => roots[0],
        (3, FlatBranch::Intermediate) => roots[1],
        (3, FlatBranch::Muddy) => roots[2],
        (c, _) => {
            return Err(Error::InvalidInput(format!(
                "unexpected flat root count {c} at b = {b}"
            )))
        }
    };
    let u0 = CanonicalState::flat(point.p, point.q, sys.n());
    newton_css(&u0, sys, b, newton_tol, 25).map(|(css, _)| css)
}

// ---------------------------------------------------------------------------
// Newton for the distributed stationary system
// ---------------------------------------------------------------------------

fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Newton on `G(u) = 0` at fixed `b`; converged when
/// `||G||_inf < tol (1 + ||u||_inf)`. Returns the record and the iteration
/// count.
pub fn newton_css(
    u0: &CanonicalState,
    sys: &SystemOps,
    b: f64,
    tol: f64,
    maxit: usize,
) -> Result<(CssRecord, usize)> {
    let mut u = u0.clone();
    let mut g = sys.residual_with_b(&u, b)?;
    for it in 0..=maxit {
        let scale = 1.0 + inf_norm(&u.as_vector().to_owned());
        if inf_norm(&g) < tol * scale {
            return Ok((CssRecord::characterize(u, sys, b)?, it));
        }
        if it == maxit {
            break;
        }
        let j = sys.jacobian_dense(&u, b)?;
        let rhs = g.mapv(|x| -x);
        let delta = j
            .solve(&rhs)
            .map_err(|e| Error::LinearSolve(format!("stationary Newton: {e}")))?;
        let mut lambda = 1.0;
        loop {
            let cand = CanonicalState::new(&u.as_vector().to_owned() + &(lambda * &delta))?;
            match sys.residual_with_b(&cand, b) {
                Ok(gc) => {
                    u = cand;
                    g = gc;
                    break;
                }
                Err(_) if lambda > 1e-6 => lambda *= 0.5,
                Err(e) => return Err(e),
            }
        }
    }
    Err(Error::NewtonDiverged { residual: inf_norm(&g) })
}

// ---------------------------------------------------------------------------
// Dispersion relation about a flat CSS
// ---------------------------------------------------------------------------

/// Per-wavenumber linearization of the canonical system about a flat CSS:
/// `[[g'(P) - b - D k^2, 1/q^2], [2 gamma - q g''(P), r + b - g'(P) + D k^2]]`.
pub fn dispersion_matrix(point: &PointState, params: &ModelParams, ksq: f64) -> [[f64; 2]; 2] {
    let g1 = model::recycling_d1(point.p);
    [
        [g1 - params.b - params.d * ksq, 1.0 / (point.q * point.q)],
        [
            2.0 * params.gamma - point.q * model::recycling_d2(point.p),
            params.r + params.b - g1 + params.d * ksq,
        ],
    ]
}

pub fn dispersion_det(point: &PointState, params: &ModelParams, ksq: f64) -> f64 {
    let m = dispersion_matrix(point, params, ksq);
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Both eigenvalues of the 2x2 dispersion matrix. Their sum is `r` for every
/// wavenumber.
pub fn dispersion_eigs(
    point: &PointState,
    params: &ModelParams,
    ksq: f64,
) -> (Complex64, Complex64) {
    let m = dispersion_matrix(point, params, ksq);
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (Complex64::new(tr / 2.0 - s, 0.0), Complex64::new(tr / 2.0 + s, 0.0))
    } else {
        let s = (-disc).sqrt();
        (Complex64::new(tr / 2.0, -s), Complex64::new(tr / 2.0, s))
    }
}

/// Smallest positive wavenumber where the dispersion determinant crosses
/// zero; marks an optimal diffusion-induced instability of the flat state.
pub fn critical_wavenumber(point: &PointState, params: &ModelParams, k_max: f64) -> Option<f64> {
    const SCAN: usize = 4000;
    let ksq_max = k_max * k_max;
    let mut prev = dispersion_det(point, params, 0.0);
    for i in 1..=SCAN {
        let ksq = ksq_max * i as f64 / SCAN as f64;
        let det = dispersion_det(point, params, ksq);
        if prev * det <= 0.0 {
            let (mut lo, mut hi) = (ksq_max * (i - 1) as f64 / SCAN as f64, ksq);
            let mut dlo = prev;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let dm = dispersion_det(point, params, mid);
                if dlo * dm <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    dlo = dm;
                }
            }
            return Some((0.5 * (lo + hi)).sqrt());
        }
        prev = det;
    }
    None
}

// ---------------------------------------------------------------------------
// Pseudo-arclength continuation in b
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFlag {
    Regular,
    Fold,
    Bifurcation,
}

impl PointFlag {
    pub fn label(&self) -> &'static str {
        match self {
            PointFlag::Regular => "regular",
            PointFlag::Fold => "fold",
            PointFlag::Bifurcation => "bif",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(PointFlag::Regular),
            "fold" => Ok(PointFlag::Fold),
            "bif" => Ok(PointFlag::Bifurcation),
            other => Err(Error::FileFormat(format!("unknown point flag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub css: CssRecord,
    pub flag: PointFlag,
}

/// A refined special point on a branch. For bifurcations the approximate
/// kernel direction is attached for branch switching.
#[derive(Debug, Clone)]
pub struct Marker {
    pub kind: PointFlag,
    pub point_index: usize,
    pub kernel: Option<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub name: String,
    pub points: Vec<BranchPoint>,
    pub markers: Vec<Marker>,
}

impl Branch {
    pub fn bifurcation_markers(&self) -> impl Iterator<Item = &Marker> {
        self.markers.iter().filter(|m| m.kind == PointFlag::Bifurcation)
    }
}

#[derive(Debug, Clone)]
pub struct ContinuationOptions {
    pub ds0: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub max_steps: usize,
    pub b_window: (f64, f64),
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Verify determinant-flagged steps by eigenvalue-crossing counts and
    /// attach kernels; switch off for cheap sweeps.
    pub detect_bifurcations: bool,
    pub center_tol: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            ds0: 0.02,
            ds_min: 1e-6,
            ds_max: 0.08,
            max_steps: 500,
            b_window: (0.5, 0.8),
            newton_tol: 1e-10,
            max_newton: 10,
            detect_bifurcations: true,
            center_tol: 1e-8,
        }
    }
}

/// Augmented continuation point (u, b).
struct AugPoint {
    u: Array1<f64>,
    b: f64,
}

fn wdot(xi: f64, ua: &Array1<f64>, ba: f64, ub: &Array1<f64>, bb: f64) -> f64 {
    xi * ua.dot(ub) + ba * bb
}

/// One corrector solve: Newton on `[G(u, b); <X - X_pred, tau>_w] = 0`.
fn corrector(
    sys: &SystemOps,
    pred: &AugPoint,
    tau_u: &Array1<f64>,
    tau_b: f64,
    xi: f64,
    opts: &ContinuationOptions,
) -> Result<AugPoint> {
    let nn = pred.u.len();
    let mut u = CanonicalState::new(pred.u.clone())?;
    let mut b = pred.b;
    u.check_admissible()?;
    for _ in 0..opts.max_newton {
        let g = sys.residual_with_b(&u, b)?;
        let scale = 1.0 + inf_norm(&u.as_vector().to_owned());
        let du = &u.as_vector().to_owned() - &pred.u;
        let cons = wdot(xi, &du, b - pred.b, tau_u, tau_b);
        if inf_norm(&g) < opts.newton_tol * scale && cons.abs() < 1e-10 * (1.0 + pred.b.abs()) {
            return Ok(AugPoint { u: u.into_vector(), b });
        }
        let j = sys.jacobian_dense(&u, b)?;
        let gb = sys.db_residual(&u);
        let mut a = Array2::zeros((nn + 1, nn + 1));
        for i in 0..nn {
            for k in 0..nn {
                a[[i, k]] = j[[i, k]];
            }
            a[[i, nn]] = gb[i];
            a[[nn, i]] = xi * tau_u[i];
        }
        a[[nn, nn]] = tau_b;
        let mut rhs = Array1::zeros(nn + 1);
        for i in 0..nn {
            rhs[i] = -g[i];
        }
        rhs[nn] = -cons;
        let delta = a
            .solve(&rhs)
            .map_err(|e| Error::LinearSolve(format!("continuation corrector: {e}")))?;
        let mut lambda = 1.0;
        loop {
            let mut cand = u.as_vector().to_owned();
            for i in 0..nn {
                cand[i] += lambda * delta[i];
            }
            let cand_state = CanonicalState::new(cand)?;
            if cand_state.check_admissible().is_ok() {
                u = cand_state;
                b += lambda * delta[nn];
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(Error::CostateSign { index: 0, value: 0.0 });
            }
        }
    }
    let g = sys.residual_with_b(&u, b)?;
    Err(Error::NewtonDiverged { residual: inf_norm(&g) })
}

fn det_sign(sys: &SystemOps, u: &CanonicalState, b: f64) -> Result<f64> {
    let j = sys.jacobian_dense(u, b)?;
    let (sign, _) = j.sln_det().map_err(|e| Error::LinearSolve(format!("det: {e}")))?;
    Ok(sign)
}

/// Tangent from the Jacobian nullspace of the augmented system, oriented so
/// the b-component has the requested sign.
fn initial_tangent(
    sys: &SystemOps,
    u: &CanonicalState,
    b: f64,
    direction: f64,
    xi: f64,
) -> Result<(Array1<f64>, f64)> {
    let j = sys.jacobian_dense(u, b)?;
    let gb = sys.db_residual(u);
    let rhs = gb.mapv(|x| -x);
    let z = j
        .solve(&rhs)
        .map_err(|e| Error::LinearSolve(format!("initial tangent: {e}")))?;
    let norm = (xi * z.dot(&z) + 1.0).sqrt();
    let mut tu = z.mapv(|x| x / norm);
    let mut tb = 1.0 / norm;
    if tb * direction < 0.0 {
        tu.mapv_inplace(|x| -x);
        tb = -tb;
    }
    Ok((tu, tb))
}

/// Pseudo-arclength continuation of `(u, b)` with a secant predictor and a
/// corrector orthogonal to the tangent. Folds are flagged from sign changes
/// of the tangent b-component; bifurcation candidates from sign changes of
/// `det dG/du`, verified by an odd change of the unstable count, refined by
/// bisection, and annotated with the kernel direction.
pub fn continue_branch(
    start: &CssRecord,
    sys: &SystemOps,
    direction: f64,
    opts: &ContinuationOptions,
) -> Result<Branch> {
    let nn = 2 * sys.n();
    let xi = 1.0 / nn as f64;
    let mut points: Vec<BranchPoint> =
        vec![BranchPoint { css: start.clone(), flag: PointFlag::Regular }];
    let mut markers: Vec<Marker> = Vec::new();

    let mut x = AugPoint { u: start.state.as_vector().to_owned(), b: start.b };
    let (mut tau_u, mut tau_b) = initial_tangent(sys, &start.state, start.b, direction, xi)?;
    let mut det_prev = det_sign(sys, &start.state, start.b)?;
    let mut nu_prev: Option<usize> = None;
    let mut ds = opts.ds0;

    for _step in 0..opts.max_steps {
        let pred = AugPoint { u: &x.u + &tau_u.mapv(|t| t * ds), b: x.b + tau_b * ds };
        match corrector(sys, &pred, &tau_u, tau_b, xi, opts) {
            Ok(xn) => {
                let state_n = CanonicalState::new(xn.u.clone())?;
                let det_new = det_sign(sys, &state_n, xn.b)?;
                let du = &xn.u - &x.u;
                let db = xn.b - x.b;
                let nrm = (xi * du.dot(&du) + db * db).sqrt();
                let (new_tu, new_tb) = (du.mapv(|v| v / nrm), db / nrm);
                let folded = new_tb * tau_b < 0.0 && tau_b.abs() > 1e-12;

                if det_new * det_prev < 0.0 && !folded && opts.detect_bifurcations {
                    let nu_a = match nu_prev {
                        Some(v) => v,
                        None => {
                            let prev_state = CanonicalState::new(x.u.clone())?;
                            spectral::spectrum(&prev_state, sys, x.b, opts.center_tol)?.n_unstable
                        }
                    };
                    let rep_b = spectral::spectrum(&state_n, sys, xn.b, opts.center_tol)?;
                    let crossings = rep_b.n_unstable as i32 - nu_a as i32;
                    nu_prev = Some(rep_b.n_unstable);
                    if crossings.rem_euclid(2) == 1 {
                        if let Some((bp, kernel)) = refine_bifurcation(
                            sys,
                            &x,
                            &AugPoint { u: xn.u.clone(), b: xn.b },
                            xi,
                            opts,
                        )? {
                            markers.push(Marker {
                                kind: PointFlag::Bifurcation,
                                point_index: points.len(),
                                kernel: Some(kernel),
                            });
                            points.push(BranchPoint { css: bp, flag: PointFlag::Bifurcation });
                        }
                    }
                } else if nu_prev.is_some() && det_new * det_prev < 0.0 {
                    // count changed parity across a fold; invalidate the cache
                    nu_prev = None;
                }

                let flag = if folded { PointFlag::Fold } else { PointFlag::Regular };
                if folded {
                    markers.push(Marker {
                        kind: PointFlag::Fold,
                        point_index: points.len(),
                        kernel: None,
                    });
                }
                points.push(BranchPoint {
                    css: CssRecord::characterize(state_n, sys, xn.b)?,
                    flag,
                });
                det_prev = det_new;
                x = xn;
                tau_u = new_tu;
                tau_b = new_tb;
                ds = (ds * 1.3).min(opts.ds_max);
                if x.b < opts.b_window.0 || x.b > opts.b_window.1 {
                    break;
                }
            }
            Err(Error::NewtonDiverged { .. }) | Err(Error::CostateSign { .. }) => {
                ds *= 0.5;
                if ds < opts.ds_min {
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Branch { name: String::new(), points, markers })
}

/// Bisection for the determinant zero between two consecutive continuation
/// points; returns the refined record and its kernel direction.
fn refine_bifurcation(
    sys: &SystemOps,
    xa: &AugPoint,
    xb: &AugPoint,
    xi: f64,
    opts: &ContinuationOptions,
) -> Result<Option<(CssRecord, Array1<f64>)>> {
    let dir_u = &xb.u - &xa.u;
    let dir_b = xb.b - xa.b;
    let nrm = (xi * dir_u.dot(&dir_u) + dir_b * dir_b).sqrt();
    let tau_u = dir_u.mapv(|v| v / nrm);
    let tau_b = dir_b / nrm;
    let det_a = det_sign(sys, &CanonicalState::new(xa.u.clone())?, xa.b)?;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best: Option<AugPoint> = None;
    for _ in 0..30 {
        let s = 0.5 * (lo + hi);
        let pred = AugPoint { u: &xa.u + &dir_u.mapv(|v| v * s), b: xa.b + dir_b * s };
        let xm = match corrector(sys, &pred, &tau_u, tau_b, xi, opts) {
            Ok(x) => x,
            Err(_) => return Ok(None),
        };
        let det_m = det_sign(sys, &CanonicalState::new(xm.u.clone())?, xm.b)?;
        if det_a * det_m > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        best = Some(xm);
        if hi - lo < 1e-7 {
            break;
        }
    }
    let xm = match best {
        Some(x) => x,
        None => return Ok(None),
    };
    let state = CanonicalState::new(xm.u.clone())?;
    let kernel = spectral::kernel_vector(&state, sys, xm.b)?;
    let css = CssRecord::characterize(state, sys, xm.b)?;
    Ok(Some((css, kernel)))
}

#[derive(Debug, Clone)]
pub struct SwitchOptions {
    pub amplitude: f64,
    pub min_amplitude: f64,
    /// Offset in `b` past the marker at which the patterned state is sought.
    pub db: f64,
    pub newton_tol: f64,
}

impl Default for SwitchOptions {
    fn default() -> Self {
        Self { amplitude: 0.1, min_amplitude: 1e-3, db: -1.5e-3, newton_tol: 1e-10 }
    }
}

/// Branch switching at a bifurcation marker: predictor `uhat + a phi` with
/// the kernel direction `phi` (state part normalized to unit norm),
/// corrected at fixed `b` slightly beyond the marker. The amplitude is
/// halved on failure.
pub fn branch_switch(
    at: &CssRecord,
    kernel: &Array1<f64>,
    sys: &SystemOps,
    opts: &SwitchOptions,
) -> Result<CssRecord> {
    let mut amp = opts.amplitude;
    let mut last_err: Option<Error> = None;
    while amp >= opts.min_amplitude {
        for db in [opts.db, -opts.db] {
            for sign in [1.0, -1.0] {
                let b = at.b + db;
                let u0 =
                    CanonicalState::new(&at.state.as_vector().to_owned() + &kernel.mapv(|v| sign * amp * v))?;
                if u0.check_admissible().is_err() {
                    continue;
                }
                match newton_css(&u0, sys, b, opts.newton_tol, 25) {
                    Ok((css, _)) => {
                        let p = css.state.p().to_owned();
                        let dev = sys.fem.normalized_l2((&p - css.avg_p).view());
                        if dev > 0.02 * amp {
                            return Ok(css);
                        }
                        // fell back onto the flat branch; retry
                    }
                    Err(e) => last_err = Some(e),
                }
            }
        }
        amp *= 0.5;
    }
    Err(last_err.unwrap_or(Error::NewtonDiverged { residual: f64::NAN }))
}

/// Re-solves the branch at every crossing of the parameter value `b`,
/// seeding Newton with the linear interpolant between bracketing points.
pub fn branch_crossings_at(
    branch: &Branch,
    sys: &SystemOps,
    b: f64,
    newton_tol: f64,
) -> Vec<CssRecord> {
    let mut out: Vec<CssRecord> = Vec::new();
    for w in branch.points.windows(2) {
        let (ba, bb) = (w[0].css.b, w[1].css.b);
        if (ba - b) * (bb - b) > 0.0 {
            continue;
        }
        let s = if (bb - ba).abs() < 1e-14 { 0.0 } else { (b - ba) / (bb - ba) };
        let ua = w[0].css.state.as_vector().to_owned();
        let ub = w[1].css.state.as_vector().to_owned();
        let guess = match CanonicalState::new(&ua + &(&ub - &ua).mapv(|v| v * s)) {
            Ok(g) => g,
            Err(_) => continue,
        };
        if guess.check_admissible().is_err() {
            continue;
        }
        if let Ok((css, _)) = newton_css(&guess, sys, b, newton_tol, 25) {
            let dup = out
                .iter()
                .any(|c| (c.avg_p - css.avg_p).abs() < 1e-6 && (c.norm_p - css.norm_p).abs() < 1e-6);
            if !dup {
                out.push(css);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Whole-diagram driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Diagram {
    pub branches: Vec<Branch>,
}

impl Diagram {
    pub fn branch(&self, name: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.name == name)
    }

    pub fn patterned(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| b.name.starts_with('p'))
    }
}

fn reversed_branch(mut br: Branch) -> Branch {
    let n = br.points.len();
    br.points.reverse();
    for m in &mut br.markers {
        m.point_index = n - 1 - m.point_index;
    }
    br
}

/// Joins two runs that share their starting point into one ordered branch.
fn concat_branches(name: &str, tail: Branch, head: Branch) -> Branch {
    let mut rev = reversed_branch(tail);
    let offset = rev.points.len().saturating_sub(1);
    rev.points.pop();
    let mut markers: Vec<Marker> =
        rev.markers.into_iter().filter(|m| m.point_index < offset).collect();
    for m in head.markers {
        markers.push(Marker { point_index: m.point_index + offset, ..m });
    }
    let mut points = rev.points;
    points.extend(head.points);
    Branch { name: name.to_string(), points, markers }
}

/// Computes the whole steady-state diagram over a parameter window: the
/// muddy flat branch, the clean/intermediate flat family split at its fold,
/// and patterned branches switched from the intermediate-segment
/// bifurcations in order of decreasing `b`.
pub fn compute_diagram(
    sys: &SystemOps,
    b_lo: f64,
    b_hi: f64,
    opts: &ContinuationOptions,
    switch_opts: &SwitchOptions,
    max_patterned: usize,
) -> Result<Diagram> {
    let mut opts = opts.clone();
    opts.b_window = (b_lo, b_hi);
    let mut branches = Vec::new();

    let fsm_start = {
        let roots = fcss_roots(&sys.params.with_b(b_hi));
        let top = roots
            .last()
            .ok_or_else(|| Error::InvalidInput(format!("no flat roots at b = {b_hi}")))?;
        let u0 = CanonicalState::flat(top.p, top.q, sys.n());
        newton_css(&u0, sys, b_hi, opts.newton_tol, 25)?.0
    };
    let mut fsm_opts = opts.clone();
    fsm_opts.detect_bifurcations = false;
    let mut fsm = continue_branch(&fsm_start, sys, -1.0, &fsm_opts)?;
    fsm.name = "FSM".into();
    branches.push(fsm);

    // seed the second family from a parameter with three roots
    let probe: Vec<f64> = (0..=40)
        .map(|i| b_lo + (b_hi - b_lo) * i as f64 / 40.0)
        .filter(|&b| fcss_roots(&sys.params.with_b(b)).len() == 3)
        .collect();
    let b_seed = if probe.iter().any(|&b| (b - 0.65).abs() < 1e-9) {
        0.65
    } else {
        match probe.first() {
            Some(&b) => b,
            None => return Ok(Diagram { branches }),
        }
    };
    let fsc_start = flat_css(FlatBranch::Clean, sys, b_seed, opts.newton_tol)?;
    let up = continue_branch(&fsc_start, sys, 1.0, &opts)?;
    let mut down_opts = opts.clone();
    down_opts.detect_bifurcations = false;
    let down = continue_branch(&fsc_start, sys, -1.0, &down_opts)?;
    let second = concat_branches("FSC-FSI", down, up);

    let fold_pos = second
        .points
        .iter()
        .position(|p| p.flag == PointFlag::Fold)
        .unwrap_or(second.points.len().saturating_sub(1));
    let fsc = Branch {
        name: "FSC".into(),
        points: second.points[..=fold_pos].to_vec(),
        markers: second
            .markers
            .iter()
            .filter(|m| m.point_index <= fold_pos)
            .cloned()
            .collect(),
    };
    let fsi = Branch {
        name: "FSI".into(),
        points: second.points[fold_pos..].to_vec(),
        markers: second
            .markers
            .iter()
            .filter(|m| m.point_index >= fold_pos)
            .map(|m| Marker { point_index: m.point_index - fold_pos, ..m.clone() })
            .collect(),
    };

    // patterned branches from the intermediate segment, most positive b first
    let mut bifs: Vec<(f64, usize)> = fsi
        .bifurcation_markers()
        .map(|m| (fsi.points[m.point_index].css.b, m.point_index))
        .collect();
    bifs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut patterned = Vec::new();
    for (rank, (_, idx)) in bifs.iter().take(max_patterned).enumerate() {
        let marker = fsi
            .markers
            .iter()
            .find(|m| m.point_index == *idx)
            .expect("marker for recorded bifurcation");
        let kernel = marker.kernel.as_ref().expect("kernel stored with bifurcation");
        let seed = match branch_switch(&fsi.points[*idx].css, kernel, sys, switch_opts) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let fwd = continue_branch(&seed, sys, -1.0, &opts)?;
        let bwd = continue_branch(&seed, sys, 1.0, &opts)?;
        let pb = concat_branches(&format!("p{}", rank + 1), bwd, fwd);
        patterned.push(pb);
    }

    branches.push(fsc);
    branches.push(fsi);
    branches.extend(patterned);
    Ok(Diagram { branches })
}
