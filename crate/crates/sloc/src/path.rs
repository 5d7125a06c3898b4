//! Canonical paths to saddle-point steady states: the initial-state
//! continuation `iscont`, discounted objective evaluation with salvage term,
//! Skiba (indifference) point detection, and pairwise dominance
//! classification of candidate optimal steady states.

use crate::bvp::{self, BvpOptions, Collocation};
use crate::cansys::SystemOps;
use crate::css::CssRecord;
use crate::error::{Error, Result};
use crate::model;
use crate::quad;
use crate::spectral::{self, ProjectionPsi};
use ndarray::{Array1, Array2};

/// A CSS with verified saddle point property and its projection data; the
/// only admissible right-BC targets.
#[derive(Debug, Clone)]
pub struct Target {
    pub id: String,
    pub css: CssRecord,
    pub psi: ProjectionPsi,
}

/// Verifies the SPP (both criteria) and builds the projection. A defective
/// CSS is rejected with its defect in the error.
pub fn make_target(id: &str, css: &CssRecord, sys: &SystemOps, center_tol: f64) -> Result<Target> {
    let mut css = css.clone();
    let report = crate::css::fill_spectrum(&mut css, sys, center_tol)?.clone();
    if !spectral::has_spp(&report, sys.params.with_b(css.b).r, center_tol)? {
        return Err(Error::NoSpp { defect: report.defect });
    }
    let psi = spectral::build_psi(&css.state, sys, css.b, center_tol)?;
    Ok(Target { id: id.to_string(), css: css.clone(), psi })
}

/// A converged connecting-orbit solution.
#[derive(Debug, Clone)]
pub struct PathSolution {
    pub t: Vec<f64>,
    /// one state row per time node, length 2n
    pub u: Array2<f64>,
    pub alpha: f64,
    pub j_value: f64,
    pub terminal_gap: f64,
    pub residual_norm: f64,
}

/// Truncated discounted objective of a state/costate path: exact-discount
/// trapezoidal quadrature of `J_ca(t)` plus the closed-form salvage term.
pub fn objective_value(t: &[f64], u: &Array2<f64>, sys: &SystemOps) -> Result<f64> {
    let n = sys.n();
    let pr = &sys.params;
    let mut jca = Vec::with_capacity(t.len());
    let mut jc = Array1::zeros(n);
    for j in 0..t.len() {
        for i in 0..n {
            let q = u[[j, n + i]];
            let k = model::optimal_control(q)?;
            jc[i] = model::current_objective(u[[j, i]], k, pr)?;
        }
        jca.push(sys.fem.avg(jc.view()));
    }
    Ok(quad::discounted_integral(t, &jca, pr.r)
        + quad::salvage(*jca.last().unwrap(), pr.r, *t.last().unwrap()))
}

/// Horizon policy: start at `t_init` (at least the spectral bound
/// `1/slowest_rate`), double on terminal-gap failure up to `t_max`.
#[derive(Debug, Clone)]
pub struct HorizonPolicy {
    pub t_init: f64,
    pub t_max: f64,
    /// accepted gap as a fraction of `1 + ||uhat||_inf`
    pub gap_frac: f64,
    pub m0: usize,
}

impl Default for HorizonPolicy {
    fn default() -> Self {
        Self { t_init: 100.0, t_max: 400.0, gap_frac: 0.05, m0: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct IscontOptions {
    pub bvp: BvpOptions,
    pub horizon: HorizonPolicy,
    /// natural continuation step in alpha and its collapse bound
    pub delta0: f64,
    pub delta_min: f64,
    /// pseudo-arclength fallback around folds of the family
    pub arclength: bool,
    pub ds_min: f64,
    pub ds_max: f64,
    pub max_arc_steps: usize,
    pub max_alpha_steps: usize,
}

impl Default for IscontOptions {
    fn default() -> Self {
        Self {
            bvp: BvpOptions::default(),
            horizon: HorizonPolicy::default(),
            delta0: 0.25,
            delta_min: 1e-4,
            arclength: true,
            ds_min: 1e-4,
            ds_max: 0.5,
            max_arc_steps: 120,
            max_alpha_steps: 80,
        }
    }
}

/// Solution family produced by the initial-state continuation, ordered by
/// traversal (arclength); `folds` indexes members where the continuation
/// direction in alpha reversed, `reached` the member at `alpha = 1`.
#[derive(Debug, Clone)]
pub struct PathFamily {
    pub target_id: String,
    pub p_zero: Array1<f64>,
    pub p_one: Array1<f64>,
    pub solutions: Vec<PathSolution>,
    pub folds: Vec<usize>,
    pub reached: Option<usize>,
    pub stalled: bool,
}

impl PathFamily {
    pub fn reached_solution(&self) -> Option<&PathSolution> {
        self.reached.map(|i| &self.solutions[i])
    }

    pub fn alpha_range(&self) -> (f64, f64) {
        self.solutions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.alpha), hi.max(s.alpha))
        })
    }
}

fn finish_solution(out: bvp::BvpOutput, u_hat: &Array1<f64>, sys: &SystemOps) -> Result<PathSolution> {
    let m = out.u.nrows() - 1;
    let gap = (0..u_hat.len())
        .map(|c| (out.u[[m, c]] - u_hat[c]).abs())
        .fold(0.0f64, f64::max);
    let j = objective_value(&out.t, &out.u, sys)?;
    Ok(PathSolution {
        t: out.t,
        u: out.u,
        alpha: out.alpha,
        j_value: j,
        terminal_gap: gap,
        residual_norm: out.residual_norm,
    })
}

fn uniform_mesh(t_end: f64, m: usize) -> Vec<f64> {
    (0..=m).map(|i| t_end * i as f64 / m as f64).collect()
}

/// Appends a geometrically stretched tail doubling the horizon, seeding the
/// extension with the target state.
fn extend_horizon(t: &[f64], u: &Array2<f64>, u_hat: &Array1<f64>) -> (Vec<f64>, Array2<f64>) {
    let t_end = *t.last().unwrap();
    let h_last = t[t.len() - 1] - t[t.len() - 2];
    let mut t_new = t.to_vec();
    let mut h = h_last.max(t_end / 40.0);
    let mut cur = t_end;
    while cur < 2.0 * t_end {
        cur = (cur + h).min(2.0 * t_end);
        t_new.push(cur);
        h *= 1.25;
    }
    let s = u.ncols();
    let mut u_new = Array2::zeros((t_new.len(), s));
    for j in 0..t_new.len() {
        if j < u.nrows() {
            u_new.row_mut(j).assign(&u.row(j));
        } else {
            for c in 0..s {
                u_new[[j, c]] = u_hat[c];
            }
        }
    }
    (t_new, u_new)
}

/// Fixed-alpha solve with terminal-gap control: the horizon doubles (up to
/// the policy cap) until the path ends close to the target.
fn solve_alpha(
    colloc: &Collocation,
    t: &[f64],
    guess: &Array2<f64>,
    alpha: f64,
    u_hat: &Array1<f64>,
    opts: &IscontOptions,
) -> Result<bvp::BvpOutput> {
    let bound = opts.horizon.gap_frac * (1.0 + u_hat.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let mut t_cur = t.to_vec();
    let mut guess_cur = guess.clone();
    loop {
        let out = bvp::solve_fixed(colloc, &t_cur, &guess_cur, alpha, &opts.bvp)?;
        let m = out.u.nrows() - 1;
        let gap = (0..u_hat.len())
            .map(|c| (out.u[[m, c]] - u_hat[c]).abs())
            .fold(0.0f64, f64::max);
        if gap < bound {
            return Ok(out);
        }
        let t_end = *out.t.last().unwrap();
        if t_end >= opts.horizon.t_max {
            return Err(Error::TerminalGap { gap, bound, t_max: opts.horizon.t_max });
        }
        let (t_ext, u_ext) = extend_horizon(&out.t, &out.u, u_hat);
        t_cur = t_ext;
        guess_cur = u_ext;
    }
}

/// Initial-state continuation toward `P(0) = p_one` along the line
/// `alpha p_one + (1 - alpha) p_zero`, starting from a known solution at
/// `alpha = 0` (by default the constant path at the target itself).
///
/// Natural stepping with a secant predictor and step halving; on persistent
/// failure before `alpha = 1` the continuation switches to pseudo-arclength
/// in (path, alpha) and traverses folds, collecting every solution found.
pub fn iscont_line(
    sys: &SystemOps,
    target: &Target,
    p_zero: Array1<f64>,
    p_one: Array1<f64>,
    seed: Option<&PathSolution>,
    opts: &IscontOptions,
) -> Result<PathFamily> {
    let n = sys.n();
    let u_hat = target.css.state.as_vector().to_owned();
    let colloc = Collocation::new(
        sys,
        &target.psi.psi,
        u_hat.clone(),
        p_zero.clone(),
        p_one.clone(),
        opts.bvp.lump_delta,
    );
    // horizon bound from the slowest stable rate
    let mut t_init = opts.horizon.t_init;
    if target.psi.slowest_rate > 0.0 {
        t_init = t_init.max(1.0 / target.psi.slowest_rate);
    }

    let mut family = PathFamily {
        target_id: target.id.clone(),
        p_zero: p_zero.clone(),
        p_one: p_one.clone(),
        solutions: Vec::new(),
        folds: Vec::new(),
        reached: None,
        stalled: false,
    };

    // starting solution at alpha = 0
    let start = match seed {
        Some(sol) => {
            let out = solve_alpha(&colloc, &sol.t, &sol.u, 0.0, &u_hat, opts)?;
            finish_solution(out, &u_hat, sys)?
        }
        None => {
            let t = uniform_mesh(t_init, opts.horizon.m0);
            let u0 = Array2::from_shape_fn((t.len(), 2 * n), |(_, c)| u_hat[c]);
            let out = solve_alpha(&colloc, &t, &u0, 0.0, &u_hat, opts)?;
            finish_solution(out, &u_hat, sys)?
        }
    };
    family.solutions.push(start);
    if family.solutions[0].alpha >= 1.0 {
        family.reached = Some(0);
        return Ok(family);
    }

    // Natural continuation in alpha.
    let mut delta = opts.delta0;
    let mut steps = 0usize;
    loop {
        let last = family.solutions.last().unwrap();
        let alpha_now = last.alpha;
        if alpha_now >= 1.0 - 1e-12 {
            family.reached = Some(family.solutions.len() - 1);
            return Ok(family);
        }
        if steps >= opts.max_alpha_steps {
            family.stalled = true;
            break;
        }
        let alpha_try = (alpha_now + delta).min(1.0);
        // secant predictor on the latest mesh
        let guess = if family.solutions.len() >= 2 {
            let prev = &family.solutions[family.solutions.len() - 2];
            let prev_on_mesh = bvp::interp_states(&prev.t, &prev.u, &last.t);
            let denom = alpha_now - prev.alpha;
            let w = if denom.abs() > 1e-14 { (alpha_try - alpha_now) / denom } else { 0.0 };
            let extrap = &last.u + &(&last.u - &prev_on_mesh).mapv(|v| w * v);
            if extrap.column(n).iter().count() > 0 && (0..last.t.len()).all(|j| (n..2 * n).all(|c| extrap[[j, c]] < 0.0)) {
                extrap
            } else {
                last.u.clone()
            }
        } else {
            last.u.clone()
        };
        steps += 1;
        match solve_alpha(&colloc, &last.t, &guess, alpha_try, &u_hat, opts) {
            Ok(out) => {
                family.solutions.push(finish_solution(out, &u_hat, sys)?);
                delta = (delta * 1.5).min(opts.delta0);
            }
            Err(Error::NewtonDiverged { .. })
            | Err(Error::CostateSign { .. })
            | Err(Error::TerminalGap { .. }) => {
                delta *= 0.5;
                if delta < opts.delta_min {
                    family.stalled = true;
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }

    if !opts.arclength || family.solutions.len() < 2 {
        return Ok(family);
    }

    // Pseudo-arclength continuation with alpha free.
    family.stalled = false;
    let xi = |t_len: usize| 1.0 / (t_len as f64 * 2.0 * n as f64);
    let mut arc_ds: Option<f64> = None;
    for _ in 0..opts.max_arc_steps {
        let idx_last = family.solutions.len() - 1;
        let last = &family.solutions[idx_last];
        let prev = &family.solutions[idx_last - 1];
        let mesh = last.t.clone();
        let prev_u = bvp::interp_states(&prev.t, &prev.u, &mesh);
        let du = &last.u - &prev_u;
        let d_alpha = last.alpha - prev.alpha;
        let xiv = xi(mesh.len());
        let norm = (xiv * du.iter().map(|v| v * v).sum::<f64>() + d_alpha * d_alpha).sqrt();
        if !(norm > 0.0) {
            family.stalled = true;
            break;
        }
        let tau_u = du.mapv(|v| v / norm);
        let tau_a = d_alpha / norm;
        let mut ds = arc_ds.unwrap_or(norm).clamp(opts.ds_min, opts.ds_max);
        let mut accepted = false;
        while ds >= opts.ds_min {
            let pred_u = &last.u + &tau_u.mapv(|v| v * ds);
            let pred_a = last.alpha + tau_a * ds;
            match bvp::solve_arclength_step(
                &colloc, &mesh, &pred_u, pred_a, &tau_u, tau_a, xiv, &opts.bvp,
            ) {
                Ok(out) => {
                    let sol = finish_solution(out, &u_hat, sys)?;
                    let new_alpha = sol.alpha;
                    let fold_here = (new_alpha - last.alpha) * d_alpha < 0.0;
                    family.solutions.push(sol);
                    if fold_here {
                        family.folds.push(family.solutions.len() - 1);
                    }
                    arc_ds = Some((ds * 1.3).min(opts.ds_max));
                    accepted = true;
                    // crossing alpha = 1: finish with a fixed solve exactly there
                    if new_alpha >= 1.0 {
                        let lastp = family.solutions.last().unwrap();
                        if let Ok(out) =
                            solve_alpha(&colloc, &lastp.t, &lastp.u, 1.0, &u_hat, opts)
                        {
                            family.solutions.push(finish_solution(out, &u_hat, sys)?);
                            family.reached = Some(family.solutions.len() - 1);
                        }
                        return Ok(family);
                    }
                    if new_alpha < 0.0 {
                        return Ok(family);
                    }
                    break;
                }
                Err(Error::NewtonDiverged { .. }) | Err(Error::CostateSign { .. }) => {
                    ds *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            family.stalled = true;
            break;
        }
    }
    Ok(family)
}

/// Convenience wrapper: homotopy from the target's own state to `p_one`.
pub fn iscont(
    sys: &SystemOps,
    target: &Target,
    p_one: Array1<f64>,
    opts: &IscontOptions,
) -> Result<PathFamily> {
    let p_zero = target.css.state.p().to_owned();
    iscont_line(sys, target, p_zero, p_one, None, opts)
}

// ---------------------------------------------------------------------------
// Skiba detection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SkibaPoint {
    /// line coordinate in family A's parameterization
    pub alpha: f64,
    pub p_skiba: Array1<f64>,
    pub j_value: f64,
    pub j_a: f64,
    pub j_b: f64,
}

fn lines_match(a: &Array1<f64>, b: &Array1<f64>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()))
}

/// Upper envelope of a family's objective over its line coordinate: the best
/// value among all segments bracketing `a`, with the bracketing member pair.
fn envelope(family: &PathFamily, flip: bool, a: f64) -> Option<(f64, usize, usize)> {
    let coord = |alpha: f64| if flip { 1.0 - alpha } else { alpha };
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..family.solutions.len().saturating_sub(1) {
        let (a0, a1) = (coord(family.solutions[i].alpha), coord(family.solutions[i + 1].alpha));
        let (lo, hi) = if a0 <= a1 { (a0, a1) } else { (a1, a0) };
        if a < lo - 1e-12 || a > hi + 1e-12 || (hi - lo) < 1e-14 {
            continue;
        }
        let w = ((a - a0) / (a1 - a0)).clamp(0.0, 1.0);
        let j = (1.0 - w) * family.solutions[i].j_value + w * family.solutions[i + 1].j_value;
        if best.map_or(true, |(bj, _, _)| j > bj) {
            best = Some((j, i, i + 1));
        }
    }
    best
}

/// Re-solves a family's BVP exactly at line coordinate `a`, seeding from the
/// envelope segment.
fn resolve_at(
    family: &PathFamily,
    flip: bool,
    a: f64,
    sys: &SystemOps,
    target: &Target,
    opts: &IscontOptions,
) -> Result<PathSolution> {
    let (_, i, k) = envelope(family, flip, a).ok_or(Error::NoIntersection)?;
    let alpha_own = if flip { 1.0 - a } else { a };
    let si = &family.solutions[i];
    let sk = &family.solutions[k];
    let uk = bvp::interp_states(&sk.t, &sk.u, &si.t);
    let denom = sk.alpha - si.alpha;
    let w = if denom.abs() > 1e-14 { (alpha_own - si.alpha) / denom } else { 0.0 };
    let guess = &si.u + &(&uk - &si.u).mapv(|v| w * v);
    let u_hat = target.css.state.as_vector().to_owned();
    let colloc = Collocation::new(
        sys,
        &target.psi.psi,
        u_hat.clone(),
        family.p_zero.clone(),
        family.p_one.clone(),
        opts.bvp.lump_delta,
    );
    let out = solve_alpha(&colloc, &si.t, &guess, alpha_own, &u_hat, opts)?;
    finish_solution(out, &u_hat, sys)
}

/// Locates the initial distribution on the common homotopy line where the
/// best objectives toward the two targets coincide, then confirms by exact
/// re-solves at the intersection.
pub fn skiba_find(
    family_a: &PathFamily,
    family_b: &PathFamily,
    target_a: &Target,
    target_b: &Target,
    sys: &SystemOps,
    opts: &IscontOptions,
) -> Result<SkibaPoint> {
    // align the two parameterizations on one line
    let flip_b = if lines_match(&family_a.p_zero, &family_b.p_zero)
        && lines_match(&family_a.p_one, &family_b.p_one)
    {
        false
    } else if lines_match(&family_a.p_zero, &family_b.p_one)
        && lines_match(&family_a.p_one, &family_b.p_zero)
    {
        true
    } else {
        return Err(Error::InvalidInput(
            "skiba families are not parameterized by a common line".into(),
        ));
    };

    let range = |f: &PathFamily, flip: bool| {
        let (lo, hi) = f.alpha_range();
        if flip {
            (1.0 - hi, 1.0 - lo)
        } else {
            (lo, hi)
        }
    };
    let (alo, ahi) = range(family_a, false);
    let (blo, bhi) = range(family_b, flip_b);
    let lo = alo.max(blo);
    let hi = ahi.min(bhi);
    if !(hi > lo) {
        return Err(Error::NoIntersection);
    }

    // scan the envelope difference for a sign change
    const SCAN: usize = 96;
    let phi = |a: f64| -> Option<f64> {
        let ja = envelope(family_a, false, a)?.0;
        let jb = envelope(family_b, flip_b, a)?.0;
        Some(ja - jb)
    };
    let mut bracket: Option<(f64, f64, f64, f64)> = None;
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..=SCAN {
        let a = lo + (hi - lo) * k as f64 / SCAN as f64;
        if let Some(v) = phi(a) {
            if let Some((pa, pv)) = prev {
                if pv * v <= 0.0 {
                    bracket = Some((pa, pv, a, v));
                    break;
                }
            }
            prev = Some((a, v));
        }
    }
    let (mut xa, mut fa, mut xb, _) = bracket.ok_or(Error::NoIntersection)?;
    for _ in 0..60 {
        let mid = 0.5 * (xa + xb);
        let fm = match phi(mid) {
            Some(v) => v,
            None => break,
        };
        if fa * fm <= 0.0 {
            xb = mid;
        } else {
            xa = mid;
            fa = fm;
        }
        if (xb - xa).abs() < 1e-10 {
            break;
        }
    }
    let a_star = 0.5 * (xa + xb);

    // confirm with exact re-solves
    let sol_a = resolve_at(family_a, false, a_star, sys, target_a, opts)?;
    let sol_b = resolve_at(family_b, flip_b, a_star, sys, target_b, opts)?;
    let (ja, jb) = (sol_a.j_value, sol_b.j_value);
    if (ja - jb).abs() > 1e-3 * ja.abs() {
        return Err(Error::InvalidInput(format!(
            "indifference confirmation failed: J_A = {ja:.6}, J_B = {jb:.6}"
        )));
    }
    let n = family_a.p_zero.len();
    let mut p_skiba = Array1::zeros(n);
    for i in 0..n {
        p_skiba[i] = a_star * family_a.p_one[i] + (1.0 - a_star) * family_a.p_zero[i];
    }
    Ok(SkibaPoint { alpha: a_star, p_skiba, j_value: 0.5 * (ja + jb), j_a: ja, j_b: jb })
}

// ---------------------------------------------------------------------------
// Dominance classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub from: String,
    pub to: String,
    pub j_path: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CssAssessment {
    pub id: String,
    pub stationary_j: f64,
    pub best_value: f64,
    pub best_target: Option<String>,
    pub dominated: bool,
}

#[derive(Debug, Clone)]
pub struct ClassifyReport {
    pub assessments: Vec<CssAssessment>,
    pub pairs: Vec<PairOutcome>,
}

/// For every SPP steady state, compares its stationary value against the
/// iscont paths from its state distribution to every other SPP target. A
/// state is dominated when some path value exceeds its stationary value by
/// the relative margin.
pub fn classify_optimal(
    targets: &[Target],
    sys: &SystemOps,
    opts: &IscontOptions,
    margin: f64,
) -> Result<ClassifyReport> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("classify_optimal needs at least one CSS".into()));
    }
    let mut pairs = Vec::new();
    let mut assessments = Vec::new();
    for from in targets {
        let jstat = from.css.j_value;
        let mut best_value = jstat;
        let mut best_target: Option<String> = None;
        for to in targets {
            if to.id == from.id {
                continue;
            }
            let p_one = from.css.state.p().to_owned();
            match iscont(sys, to, p_one, opts) {
                Ok(fam) => match fam.reached_solution() {
                    Some(sol) => {
                        pairs.push(PairOutcome {
                            from: from.id.clone(),
                            to: to.id.clone(),
                            j_path: Some(sol.j_value),
                            error: None,
                        });
                        if sol.j_value > best_value {
                            best_value = sol.j_value;
                            best_target = Some(to.id.clone());
                        }
                    }
                    None => pairs.push(PairOutcome {
                        from: from.id.clone(),
                        to: to.id.clone(),
                        j_path: None,
                        error: Some("continuation did not reach alpha = 1".into()),
                    }),
                },
                Err(e) => pairs.push(PairOutcome {
                    from: from.id.clone(),
                    to: to.id.clone(),
                    j_path: None,
                    error: Some(e.to_string()),
                }),
            }
        }
        let dominated = best_value > jstat + margin * jstat.abs();
        assessments.push(CssAssessment {
            id: from.id.clone(),
            stationary_j: jstat,
            best_value,
            best_target: if dominated { best_target } else { None },
            dominated,
        });
    }
    Ok(ClassifyReport { assessments, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::css;
    use crate::fem::Mesh1d;
    use crate::model::ModelParams;
    use approx::assert_relative_eq;

    const L: f64 = 2.0 * std::f64::consts::PI / 0.44;

    fn setup(b: f64, n: usize) -> SystemOps {
        let params = ModelParams::new(0.03, 0.5, b, 0.5).unwrap();
        SystemOps::new(params, Mesh1d::uniform(L, n).unwrap())
    }

    #[test]
    fn constant_path_objective_is_stationary_value() {
        let sys = setup(0.65, 15);
        let fsm = css::flat_css(css::FlatBranch::Muddy, &sys, 0.65, 1e-10).unwrap();
        let target = make_target("FSM", &fsm, &sys, 1e-8).unwrap();
        let opts = IscontOptions::default();
        let fam = iscont(&sys, &target, fsm.state.p().to_owned(), &opts).unwrap();
        // p_one equals the target state: alpha = 0 is already the answer
        let sol = &fam.solutions[0];
        assert_relative_eq!(sol.j_value, fsm.j_value, max_relative = 1e-10);
        assert!(sol.terminal_gap < 1e-9);
    }

    #[test]
    fn defective_target_is_rejected_with_its_defect() {
        let sys = setup(0.65, 31);
        let fsi = css::flat_css(css::FlatBranch::Intermediate, &sys, 0.65, 1e-10).unwrap();
        match make_target("FSI", &fsi, &sys, 1e-8) {
            Err(Error::NoSpp { defect }) => assert!(defect < 0, "defect {defect}"),
            other => panic!("expected NoSpp, got {other:?}"),
        }
    }

    #[test]
    fn flat_homotopy_reaches_alpha_one() {
        let sys = setup(0.65, 15);
        let fsm = css::flat_css(css::FlatBranch::Muddy, &sys, 0.65, 1e-10).unwrap();
        let target = make_target("FSM", &fsm, &sys, 1e-8).unwrap();
        let opts = IscontOptions::default();
        // a flat start inside the muddy state's reachable region
        let n = 15;
        let p0 = Array1::from_elem(n, 1.0);
        let fam = iscont(&sys, &target, p0.clone(), &opts).unwrap();
        assert!(fam.reached.is_some(), "stalled: {:?}", fam.stalled);
        let sol = fam.reached_solution().unwrap();
        assert_relative_eq!(sol.alpha, 1.0, epsilon = 1e-12);
        for i in 0..n {
            assert_relative_eq!(sol.u[[0, i]], 1.0, epsilon = 1e-8);
        }
        assert!(sol.terminal_gap < 0.05 * (1.0 + 8.0));
        assert!(sol.j_value.is_finite());
    }

    #[test]
    fn family_toward_an_unreachable_state_folds_and_spirals() {
        // from the clean state's distribution no path to the muddy target
        // exists; the family folds and winds around the intermediate focus,
        // with every later sweep carrying a lower objective
        let sys = setup(0.65, 15);
        let fsm = css::flat_css(css::FlatBranch::Muddy, &sys, 0.65, 1e-10).unwrap();
        let fsc = css::flat_css(css::FlatBranch::Clean, &sys, 0.65, 1e-10).unwrap();
        let target = make_target("FSM", &fsm, &sys, 1e-8).unwrap();
        let mut opts = IscontOptions::default();
        opts.max_arc_steps = 40;
        let fam = iscont(&sys, &target, fsc.state.p().to_owned(), &opts).unwrap();
        assert!(fam.reached.is_none());
        assert!(!fam.folds.is_empty(), "expected a fold in alpha");
        let fold_alpha = fam.solutions[fam.folds[0] - 1].alpha;
        assert!(fold_alpha > 0.7 && fold_alpha < 1.0, "first fold at {fold_alpha}");
    }

    #[test]
    fn time_mesh_halving_is_second_order_in_objective() {
        let sys = setup(0.65, 9);
        let fsm = css::flat_css(css::FlatBranch::Muddy, &sys, 0.65, 1e-10).unwrap();
        let target = make_target("FSM", &fsm, &sys, 1e-8).unwrap();
        let u_hat = fsm.state.as_vector().to_owned();
        let p_start = Array1::from_elem(9, 1.1);
        let colloc = Collocation::new(
            &sys,
            &target.psi.psi,
            u_hat.clone(),
            fsm.state.p().to_owned(),
            p_start,
            None,
        );
        let mut opts = BvpOptions::default();
        opts.adaptive = false;
        let j_at = |m: usize| {
            let t: Vec<f64> = (0..=m).map(|i| 100.0 * i as f64 / m as f64).collect();
            let u0 = Array2::from_shape_fn((t.len(), 18), |(_, c)| u_hat[c]);
            let out = bvp::solve_fixed(&colloc, &t, &u0, 1.0, &opts).unwrap();
            objective_value(&out.t, &out.u, &sys).unwrap()
        };
        let (j1, j2, j4) = (j_at(50), j_at(100), j_at(200));
        let e1 = (j1 - j4).abs();
        let e2 = (j2 - j4).abs();
        // halving the step reduces the Richardson error by about 4 (allow
        // 2.5..6.5 since the finest mesh is itself inexact)
        let ratio = e1 / e2;
        assert!(ratio > 2.5 && ratio < 6.5, "order ratio {ratio}");
    }
}
