//! Assembled distributed canonical system.
//!
//! With nodal vector `u = (P_1..P_n, q_1..q_n)` the evolution form is
//! `M u' = -G(u)` with `G(u) = K_b u - M_b F(u)`, where `M_b = diag(M, M)`,
//! `K_b = diag(+DK, -DK)` (diffusion on the state, anti-diffusion on the
//! costate), and `F` applies the pointwise reaction terms with the control
//! eliminated through `k = -1/q`. Steady states solve `G(u) = 0`; stability
//! is read from eigenvalues of `-dG/du` generalized against `M_b`.
//!
//! The full canonical system is ill-posed as an initial value problem, so
//! only the state equation alone (for an externally chosen control) gets a
//! time integrator here.

use crate::error::{Error, Result};
use crate::fem::{solve_tridiag, FemOps, Mesh1d};
use crate::model::{self, ModelParams};
use crate::quad;
use ndarray::{s, Array1, Array2, ArrayView1};

/// Paired state/costate nodal vector of length `2n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalState {
    u: Array1<f64>,
}

impl CanonicalState {
    pub fn new(u: Array1<f64>) -> Result<Self> {
        if u.len() % 2 != 0 || u.is_empty() {
            return Err(Error::InvalidInput(format!(
                "canonical state must have even length, got {}",
                u.len()
            )));
        }
        Ok(Self { u })
    }

    pub fn from_parts(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<Self> {
        if p.len() != q.len() {
            return Err(Error::InvalidInput("state and costate length mismatch".into()));
        }
        let mut u = Array1::zeros(2 * p.len());
        u.slice_mut(s![..p.len()]).assign(&p);
        u.slice_mut(s![p.len()..]).assign(&q);
        Ok(Self { u })
    }

    /// Spatially constant state lifted onto an `n`-node mesh.
    pub fn flat(p: f64, q: f64, n: usize) -> Self {
        let mut u = Array1::zeros(2 * n);
        u.slice_mut(s![..n]).fill(p);
        u.slice_mut(s![n..]).fill(q);
        Self { u }
    }

    pub fn n(&self) -> usize {
        self.u.len() / 2
    }

    pub fn as_vector(&self) -> ArrayView1<'_, f64> {
        self.u.view()
    }

    pub fn into_vector(self) -> Array1<f64> {
        self.u
    }

    pub fn p(&self) -> ArrayView1<'_, f64> {
        self.u.slice(s![..self.n()])
    }

    pub fn q(&self) -> ArrayView1<'_, f64> {
        self.u.slice(s![self.n()..])
    }

    /// All costate entries strictly negative, so `k = -1/q > 0` everywhere.
    pub fn check_admissible(&self) -> Result<()> {
        let n = self.n();
        for (i, &q) in self.q().iter().enumerate() {
            if !(q < 0.0) {
                return Err(Error::CostateSign { index: n + i, value: q });
            }
        }
        Ok(())
    }

    /// Nodal control `k = -1/q`.
    pub fn control(&self) -> Result<Array1<f64>> {
        self.check_admissible()?;
        Ok(self.q().mapv(|q| -1.0 / q))
    }
}

/// Immutable assembly context: model parameters, mesh, and FEM operators.
#[derive(Debug, Clone)]
pub struct SystemOps {
    pub params: ModelParams,
    pub mesh: Mesh1d,
    pub fem: FemOps,
}

impl SystemOps {
    pub fn new(params: ModelParams, mesh: Mesh1d) -> Self {
        let fem = FemOps::assemble(&mesh);
        Self { params, mesh, fem }
    }

    pub fn n(&self) -> usize {
        self.mesh.n()
    }

    /// Pointwise reaction terms `F(u) = (f_P, f_q)` with `k = -1/q`.
    fn nonlinearity(&self, u: &CanonicalState, b: f64) -> Result<(Array1<f64>, Array1<f64>)> {
        u.check_admissible()?;
        let pr = self.params.with_b(b);
        let n = u.n();
        let mut fp = Array1::zeros(n);
        let mut fq = Array1::zeros(n);
        let (p, q) = (u.p(), u.q());
        for i in 0..n {
            let k = -1.0 / q[i];
            fp[i] = model::state_rhs(p[i], k, &pr);
            fq[i] = model::costate_rhs(p[i], q[i], &pr);
        }
        Ok((fp, fq))
    }

    /// Residual `G(u) = K_b u - M_b F(u)` at the stored `b`.
    pub fn residual(&self, u: &CanonicalState) -> Result<Array1<f64>> {
        self.residual_with_b(u, self.params.b)
    }

    /// Residual with the degradation rate overridden (continuation in `b`).
    pub fn residual_with_b(&self, u: &CanonicalState, b: f64) -> Result<Array1<f64>> {
        let (fp, fq) = self.nonlinearity(u, b)?;
        let n = u.n();
        let d = self.params.d;
        let mut g = Array1::zeros(2 * n);
        let kp = self.fem.stiffness.apply(u.p());
        let kq = self.fem.stiffness.apply(u.q());
        let mfp = self.fem.mass.apply(fp.view());
        let mfq = self.fem.mass.apply(fq.view());
        for i in 0..n {
            g[i] = d * kp[i] - mfp[i];
            g[n + i] = -d * kq[i] - mfq[i];
        }
        Ok(g)
    }

    /// Nodal 2x2 blocks of `dF/du`:
    /// `[[g'(P) - b, 1/q^2], [2 gamma - q g''(P), r + b - g'(P)]]`.
    pub fn nodal_jacobian(&self, u: &CanonicalState, b: f64) -> Result<Vec<[f64; 4]>> {
        u.check_admissible()?;
        let pr = self.params.with_b(b);
        let (p, q) = (u.p(), u.q());
        Ok((0..u.n())
            .map(|i| {
                let g1 = model::recycling_d1(p[i]);
                [
                    g1 - pr.b,
                    1.0 / (q[i] * q[i]),
                    2.0 * pr.gamma - q[i] * model::recycling_d2(p[i]),
                    pr.r + pr.b - g1,
                ]
            })
            .collect())
    }

    /// Dense `dG/du` (2n x 2n). The evolution Jacobian of `M u' = -G(u)` is
    /// the negative of this, generalized against `M_b`.
    pub fn jacobian_dense(&self, u: &CanonicalState, b: f64) -> Result<Array2<f64>> {
        let n = u.n();
        let blocks = self.nodal_jacobian(u, b)?;
        let d = self.params.d;
        let mut j = Array2::zeros((2 * n, 2 * n));
        let (mass, stiff) = (&self.fem.mass, &self.fem.stiffness);
        for i in 0..n {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(n);
            for kcol in lo..hi {
                let m = mass.get(i, kcol);
                let kk = stiff.get(i, kcol);
                let a = &blocks[kcol];
                j[[i, kcol]] = d * kk - m * a[0];
                j[[i, n + kcol]] = -m * a[1];
                j[[n + i, kcol]] = -m * a[2];
                j[[n + i, n + kcol]] = -d * kk - m * a[3];
            }
        }
        Ok(j)
    }

    /// `dG/db = (M P, -M q)`, from `dF_P/db = -P` and `dF_q/db = q`.
    pub fn db_residual(&self, u: &CanonicalState) -> Array1<f64> {
        let n = u.n();
        let mp = self.fem.mass.apply(u.p());
        let mq = self.fem.mass.apply(u.q());
        let mut g = Array1::zeros(2 * n);
        for i in 0..n {
            g[i] = mp[i];
            g[n + i] = -mq[i];
        }
        g
    }

    /// Applies `M_b = diag(M, M)`.
    pub fn mass_apply_block(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let n = x.len() / 2;
        let top = self.fem.mass.apply(x.slice(s![..n]));
        let bot = self.fem.mass.apply(x.slice(s![n..]));
        let mut y = Array1::zeros(2 * n);
        y.slice_mut(s![..n]).assign(&top);
        y.slice_mut(s![n..]).assign(&bot);
        y
    }

    /// Applies `M_b^{-1}`.
    pub fn mass_solve_block(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let n = x.len() / 2;
        let top = self.fem.mass_solve(x.slice(s![..n]));
        let bot = self.fem.mass_solve(x.slice(s![n..]));
        let mut y = Array1::zeros(2 * n);
        y.slice_mut(s![..n]).assign(&top);
        y.slice_mut(s![n..]).assign(&bot);
        y
    }

    /// Evolution operator `B = M_b^{-1} (-dG/du)`, whose eigenvalues carry
    /// the stability convention used everywhere in this crate.
    pub fn evolution_matrix(&self, u: &CanonicalState, b: f64) -> Result<Array2<f64>> {
        let j = self.jacobian_dense(u, b)?;
        let nn = 2 * u.n();
        let mut bmat = Array2::zeros((nn, nn));
        for c in 0..nn {
            let col = self.mass_solve_block(j.column(c));
            for rrow in 0..nn {
                bmat[[rrow, c]] = -col[rrow];
            }
        }
        Ok(bmat)
    }
}

/// Time stepping scheme for the forward state equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvpScheme {
    BackwardEuler,
    Trapezoidal,
}

/// Forward trajectory of the state equation under an external control,
/// with the truncated discounted objective of the `(P, k)` pair.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub t: Vec<f64>,
    pub p: Vec<Array1<f64>>,
    pub objective: f64,
}

/// Integrates `M P' = -D K P + M f(P, k(x,t))` with Neumann boundary
/// conditions and the externally chosen control `k`. Implicit stepping, so
/// the step size is not restricted by the diffusive CFL.
pub fn forward_ivp<C>(
    p0: ArrayView1<f64>,
    control: C,
    sys: &SystemOps,
    t_end: f64,
    dt: f64,
    scheme: IvpScheme,
) -> Result<StateTrajectory>
where
    C: Fn(f64, f64) -> f64,
{
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::InvalidInput(format!("need dt > 0 and T > 0, got dt={dt}, T={t_end}")));
    }
    let n = sys.n();
    if p0.len() != n {
        return Err(Error::InvalidInput(format!(
            "initial state has {} nodes, mesh has {n}",
            p0.len()
        )));
    }
    let pr = &sys.params;
    let nodes = sys.mesh.nodes().to_vec();
    let control_at = |t: f64| -> Result<Array1<f64>> {
        let mut k = Array1::zeros(n);
        for i in 0..n {
            let v = control(nodes[i], t);
            if !(v > 0.0) {
                return Err(Error::NonpositiveControl { value: v });
            }
            k[i] = v;
        }
        Ok(k)
    };

    let nsteps = (t_end / dt).ceil() as usize;
    let mut t_mesh = Vec::with_capacity(nsteps + 1);
    let mut states = Vec::with_capacity(nsteps + 1);
    let mut jca = Vec::with_capacity(nsteps + 1);

    let mut p = p0.to_owned();
    let mut t = 0.0;
    let mut k_now = control_at(0.0)?;
    t_mesh.push(0.0);
    states.push(p.clone());
    jca.push(objective_density(&p, &k_now, sys, pr)?);

    let reaction = |p: &Array1<f64>, k: &Array1<f64>| -> Array1<f64> {
        Array1::from_iter((0..n).map(|i| model::state_rhs(p[i], k[i], pr)))
    };
    // rhs(P) = -D K P + M f(P, k)
    let rhs = |p: &Array1<f64>, k: &Array1<f64>| -> Array1<f64> {
        let kp = sys.fem.stiffness.apply(p.view());
        let mf = sys.fem.mass.apply(reaction(p, k).view());
        Array1::from_iter((0..n).map(|i| -pr.d * kp[i] + mf[i]))
    };

    for step in 0..nsteps {
        let h = (t_end - t).min(dt);
        let t_next = t + h;
        let k_next = control_at(t_next)?;
        // Newton for the implicit step; unknown P_next
        let mut p_next = p.clone();
        let theta = match scheme {
            IvpScheme::BackwardEuler => 1.0,
            IvpScheme::Trapezoidal => 0.5,
        };
        let explicit = if theta < 1.0 { rhs(&p, &k_now) } else { Array1::zeros(n) };
        let mut converged = false;
        for _ in 0..30 {
            // residual: M (P+ - P)/h - theta rhs(P+) - (1-theta) rhs(P)
            let mdiff = sys.fem.mass.apply((&p_next - &p).view());
            let rp = rhs(&p_next, &k_next);
            let mut res = Array1::<f64>::zeros(n);
            for i in 0..n {
                res[i] = mdiff[i] / h - theta * rp[i] - (1.0 - theta) * explicit[i];
            }
            let rnorm = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let scale = 1.0 + p_next.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if rnorm < 1e-12 * scale {
                converged = true;
                break;
            }
            // Jacobian: M/h + theta (D K - M diag(f_P)); tridiagonal
            let mut sub = vec![0.0; n - 1];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n - 1];
            let fp: Vec<f64> = (0..n)
                .map(|i| -pr.b + model::recycling_d1(p_next[i]))
                .collect();
            for i in 0..n {
                diag[i] = sys.fem.mass.diag[i] * (1.0 / h - theta * fp[i])
                    + theta * pr.d * sys.fem.stiffness.diag[i];
            }
            for i in 0..n - 1 {
                sup[i] = sys.fem.mass.off[i] * (1.0 / h - theta * fp[i + 1])
                    + theta * pr.d * sys.fem.stiffness.off[i];
                sub[i] = sys.fem.mass.off[i] * (1.0 / h - theta * fp[i])
                    + theta * pr.d * sys.fem.stiffness.off[i];
            }
            let neg_res: Vec<f64> = res.iter().map(|v| -v).collect();
            let delta = solve_tridiag(&sub, &diag, &sup, &neg_res)?;
            for i in 0..n {
                p_next[i] += delta[i];
            }
        }
        if !converged {
            return Err(Error::NewtonDiverged { residual: f64::NAN });
        }
        t = t_next;
        p = p_next;
        k_now = k_next;
        t_mesh.push(t);
        states.push(p.clone());
        jca.push(objective_density(&p, &k_now, sys, pr)?);
        let _ = step;
    }

    let objective = quad::discounted_integral(&t_mesh, &jca, pr.r)
        + quad::salvage(*jca.last().unwrap(), pr.r, t_end);
    Ok(StateTrajectory { t: t_mesh, p: states, objective })
}

/// Spatially averaged objective density `J_ca = <ln k - gamma P^2>`.
fn objective_density(
    p: &Array1<f64>,
    k: &Array1<f64>,
    sys: &SystemOps,
    pr: &ModelParams,
) -> Result<f64> {
    let mut jc = Array1::zeros(p.len());
    for i in 0..p.len() {
        jc[i] = model::current_objective(p[i], k[i], pr)?;
    }
    Ok(sys.fem.avg(jc.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const L: f64 = 2.0 * std::f64::consts::PI / 0.44;

    fn sys(b: f64, n: usize) -> SystemOps {
        let params = ModelParams::new(0.03, 0.5, b, 0.5).unwrap();
        SystemOps::new(params, Mesh1d::uniform(L, n).unwrap())
    }

    /// Test-local 0D steady-state oracle: bisection + polish on the scalar
    /// stationarity residual, independent of the css module.
    fn flat_root_near(b: f64, p_guess: f64) -> (f64, f64) {
        let res = |p: f64| {
            let qhat = -2.0 * 0.5 * p / (0.03 + b - model::recycling_d1(p));
            -1.0 / qhat - (b * p - model::recycling(p))
        };
        let mut lo = p_guess - 0.1;
        let mut hi = p_guess + 0.1;
        assert!(res(lo) * res(hi) < 0.0, "oracle bracket missing at b={b}, p={p_guess}");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if res(lo) * res(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let p = 0.5 * (lo + hi);
        let q = -2.0 * 0.5 * p / (0.03 + b - model::recycling_d1(p));
        (p, q)
    }

    #[test]
    fn flat_equilibrium_has_zero_residual() {
        let sys = sys(0.65, 41);
        let (p, q) = flat_root_near(0.65, 1.44);
        let u = CanonicalState::flat(p, q, 41);
        let g = sys.residual(&u).unwrap();
        let gn = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(gn < 1e-10, "residual at flat CSS: {gn:.3e}");
    }

    #[test]
    fn flat_nonequilibrium_residual_value() {
        let sys = sys(0.65, 31);
        let u = CanonicalState::flat(1.0, -1.0, 31);
        let g = sys.residual(&u).unwrap();
        let scaled = sys.mass_solve_block(g.view());
        for i in 0..31 {
            assert_relative_eq!(scaled[i], -0.85, epsilon = 1e-10);
        }
    }

    #[test]
    fn q_sign_violation_is_domain_error() {
        let sys = sys(0.65, 11);
        let mut u = CanonicalState::flat(1.0, -1.0, 11).into_vector();
        u[11 + 4] = 0.1;
        let u = CanonicalState::new(u).unwrap();
        assert!(matches!(sys.residual(&u), Err(Error::CostateSign { .. })));
    }

    #[test]
    fn cosine_perturbation_has_signed_diffusion_response() {
        let sys = sys(0.65, 41);
        let n = 41;
        let (phat, qhat) = (1.0, -2.0);
        let base = CanonicalState::flat(phat, qhat, n);
        let g0 = sys.residual(&base).unwrap();
        let eps = 1e-6;
        let cosv: Vec<f64> = sys
            .mesh
            .nodes()
            .iter()
            .map(|&x| (std::f64::consts::PI * (x + L) / (2.0 * L)).cos())
            .collect();
        // perturb P only
        let mut up = base.clone().into_vector();
        for i in 0..n {
            up[i] += eps * cosv[i];
        }
        let gp = sys.residual(&CanonicalState::new(up).unwrap()).unwrap();
        // the K part adds +D K (eps cos) to the P block: positive against cos
        // (stiffness is PSD), and the response is O(eps)
        let mut dot_p = 0.0;
        let mut norm = 0.0;
        for i in 0..n {
            dot_p += (gp[i] - g0[i]) * cosv[i];
            norm += (gp[i] - g0[i]).powi(2);
        }
        assert!(norm.sqrt() < 10.0 * eps);
        // remove the reaction contribution: repeat with D = 0
        let sys0 = SystemOps::new(ModelParams::new(0.03, 0.5, 0.65, 0.0).unwrap(), Mesh1d::uniform(L, n).unwrap());
        let g0_nod = sys0.residual(&base).unwrap();
        let mut up0 = base.clone().into_vector();
        for i in 0..n {
            up0[i] += eps * cosv[i];
        }
        let gp_nod = sys0.residual(&CanonicalState::new(up0).unwrap()).unwrap();
        let mut dot_p_nod = 0.0;
        for i in 0..n {
            dot_p_nod += (gp_nod[i] - g0_nod[i]) * cosv[i];
        }
        // diffusion contribution to the P block is positive definite
        assert!(dot_p > dot_p_nod, "+DK missing on the state block");
        // and on the q block it enters with the opposite sign
        let mut uq = base.clone().into_vector();
        for i in 0..n {
            uq[n + i] += eps * cosv[i];
        }
        let gq = sys.residual(&CanonicalState::new(uq).unwrap()).unwrap();
        let gq_nod = {
            let mut uq0 = base.clone().into_vector();
            for i in 0..n {
                uq0[n + i] += eps * cosv[i];
            }
            sys0.residual(&CanonicalState::new(uq0).unwrap()).unwrap()
        };
        let mut dot_q = 0.0;
        let mut dot_q_nod = 0.0;
        for i in 0..n {
            dot_q += (gq[n + i] - g0[n + i]) * cosv[i];
            dot_q_nod += (gq_nod[n + i] - g0_nod[n + i]) * cosv[i];
        }
        assert!(dot_q < dot_q_nod, "-DK missing on the costate block");
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let sys = sys(0.68, 21);
        let n = 21;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let p = Array1::from_iter((0..n).map(|_| rng.random_range(0.05..2.5)));
            let q = Array1::from_iter((0..n).map(|_| -rng.random_range(0.2..8.0)));
            let u = CanonicalState::from_parts(p.view(), q.view()).unwrap();
            let j = sys.jacobian_dense(&u, 0.68).unwrap();
            let jnorm = j.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let h = 1e-6;
            for col in 0..2 * n {
                let mut up = u.clone().into_vector();
                let mut dn = up.clone();
                up[col] += h;
                dn[col] -= h;
                let gp = sys
                    .residual_with_b(&CanonicalState::new(up).unwrap(), 0.68)
                    .unwrap();
                let gm = sys
                    .residual_with_b(&CanonicalState::new(dn).unwrap(), 0.68)
                    .unwrap();
                for row in 0..2 * n {
                    let fd = (gp[row] - gm[row]) / (2.0 * h);
                    assert!(
                        (j[[row, col]] - fd).abs() < 1e-6 * (1.0 + jnorm),
                        "J[{row},{col}] = {} vs fd {}",
                        j[[row, col]],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn db_derivative_matches_finite_differences() {
        let sys = sys(0.65, 15);
        let u = CanonicalState::flat(0.9, -3.0, 15);
        let h = 1e-6;
        let gp = sys.residual_with_b(&u, 0.65 + h).unwrap();
        let gm = sys.residual_with_b(&u, 0.65 - h).unwrap();
        let db = sys.db_residual(&u);
        for i in 0..30 {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert_relative_eq!(db[i], fd, epsilon = 1e-7, max_relative = 1e-6);
        }
    }

    #[test]
    fn flat_state_preserves_cosine_mode_pairs() {
        // at a flat state the Jacobian maps span{cos_j e_P, cos_j e_q} into
        // itself (uniform-mesh Neumann eigenvectors)
        let sys = sys(0.65, 41);
        let n = 41;
        let u = CanonicalState::flat(0.9, -3.0, n);
        let j = sys.jacobian_dense(&u, 0.65).unwrap();
        for mode in [1usize, 3] {
            let cosv = Array1::from_iter(
                sys.mesh
                    .nodes()
                    .iter()
                    .map(|&x| (mode as f64 * std::f64::consts::PI * (x + L) / (2.0 * L)).cos()),
            );
            // generalized Rayleigh quotients for the in-span projection
            let m_cos = sys.fem.mass.apply(cosv.view());
            let cc = m_cos.dot(&cosv);
            for part in 0..2 {
                let mut v = Array1::zeros(2 * n);
                for i in 0..n {
                    v[part * n + i] = cosv[i];
                }
                let jv = j.dot(&v);
                let w = sys.mass_solve_block(jv.view());
                // coefficients of w on the two basis vectors (M-inner product)
                let wp = w.slice(s![..n]).to_owned();
                let wq = w.slice(s![n..]).to_owned();
                let cp = sys.fem.mass.apply(wp.view()).dot(&cosv) / cc;
                let cq = sys.fem.mass.apply(wq.view()).dot(&cosv) / cc;
                // residual off the span
                let mut res = 0.0f64;
                for i in 0..n {
                    res = res.max((wp[i] - cp * cosv[i]).abs());
                    res = res.max((wq[i] - cq * cosv[i]).abs());
                }
                assert!(res < 1e-10, "mode {mode} part {part}: off-span residual {res:.2e}");
            }
        }
    }

    #[test]
    fn nodal_control_derivative() {
        let sys = sys(0.65, 11);
        let u = CanonicalState::flat(1.0, -2.0, 11);
        let blocks = sys.nodal_jacobian(&u, 0.65).unwrap();
        assert_relative_eq!(blocks[5][1], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn forward_ivp_stays_at_equilibrium() {
        let sys = sys(0.65, 31);
        let (p, q) = flat_root_near(0.65, 0.45);
        let khat = -1.0 / q;
        let p0 = Array1::from_elem(31, p);
        let traj = forward_ivp(p0.view(), |_, _| khat, &sys, 20.0, 0.5, IvpScheme::BackwardEuler).unwrap();
        let last = traj.p.last().unwrap();
        for v in last.iter() {
            assert_relative_eq!(*v, p, epsilon = 1e-8);
        }
    }

    #[test]
    fn forward_ivp_rejects_bad_control() {
        let sys = sys(0.65, 11);
        let p0 = Array1::from_elem(11, 1.0);
        let r = forward_ivp(p0.view(), |_, _| -0.1, &sys, 1.0, 0.1, IvpScheme::BackwardEuler);
        assert!(matches!(r, Err(Error::NonpositiveControl { .. })));
    }

    #[test]
    fn forward_ivp_flat_matches_scalar_oracle() {
        // D = 0 and flat data: every node follows the scalar ODE
        let params = ModelParams::new(0.03, 0.5, 0.65, 0.0).unwrap();
        let sys = SystemOps::new(params, Mesh1d::uniform(L, 21).unwrap());
        let p0 = Array1::from_elem(21, 1.3);
        let kc = 0.2;
        let dt = 0.02;
        let t_end = 8.0;
        let traj =
            forward_ivp(p0.view(), |_, _| kc, &sys, t_end, dt, IvpScheme::Trapezoidal).unwrap();
        // independent scalar trapezoidal integration
        let mut ps = 1.3f64;
        let pr = &sys.params;
        let nsteps = (t_end / dt).round() as usize;
        for _ in 0..nsteps {
            // solve ps_next via fixed-point Newton on the scalar trapezoid
            let f0 = model::state_rhs(ps, kc, pr);
            let mut pn = ps;
            for _ in 0..50 {
                let f1 = model::state_rhs(pn, kc, pr);
                let res = pn - ps - 0.5 * dt * (f0 + f1);
                let dres = 1.0 - 0.5 * dt * (-pr.b + model::recycling_d1(pn));
                pn -= res / dres;
                if res.abs() < 1e-14 {
                    break;
                }
            }
            ps = pn;
        }
        let last = traj.p.last().unwrap();
        for v in last.iter() {
            assert_relative_eq!(*v, ps, epsilon = 1e-9);
        }
    }

    #[test]
    fn forward_ivp_first_order_in_dt() {
        let sys = sys(0.65, 21);
        let p0 = Array1::from_iter(
            sys.mesh
                .nodes()
                .iter()
                .map(|&x| 1.0 + 0.3 * (0.3 * x).sin()),
        );
        let run = |dt: f64, scheme: IvpScheme| {
            forward_ivp(p0.view(), |_, _| 0.2, &sys, 4.0, dt, scheme)
                .unwrap()
                .p
                .last()
                .unwrap()
                .clone()
        };
        let reference = run(0.002, IvpScheme::Trapezoidal);
        let err = |dt: f64, scheme: IvpScheme| {
            let p = run(dt, scheme);
            p.iter()
                .zip(reference.iter())
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
        };
        let e1 = err(0.2, IvpScheme::BackwardEuler);
        let e2 = err(0.1, IvpScheme::BackwardEuler);
        let ratio = e1 / e2;
        assert!(ratio > 1.6 && ratio < 2.6, "BE order ratio {ratio}");
        let t1 = err(0.2, IvpScheme::Trapezoidal);
        let t2 = err(0.1, IvpScheme::Trapezoidal);
        let tratio = t1 / t2;
        assert!(tratio > 3.0 && tratio < 5.5, "trapezoid order ratio {tratio}");
    }
}
