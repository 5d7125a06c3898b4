//! Trapezoidal collocation for the connecting-orbit two-point BVP
//!
//! ```text
//!   M_b (u_{j+1} - u_j)/h_j + (G(u_j) + G(u_{j+1}))/2 = 0,   j = 0..m-1
//!   P(0) = alpha p_one + (1 - alpha) p_zero                   (n left BC)
//!   Psi (u_m - uhat) = 0                                      (n right BC)
//! ```
//!
//! solved by Newton with a structured elimination of the almost-block-
//! diagonal Jacobian. An optional scalar border (the homotopy parameter
//! `alpha` as unknown plus one dense arclength row) supports continuation
//! around folds of the solution family.
//!
//! Residuals always use the exact mass and stiffness matrices. With a
//! lumping threshold the *Jacobian* blocks use the thresholded `M^{-1}K`
//! instead, which only changes the Newton path, never the converged answer.

use crate::cansys::{CanonicalState, SystemOps};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use ndarray_linalg::Solve;

#[derive(Debug, Clone)]
pub struct BvpOptions {
    /// Collocation residual tolerance, scaled by `1 + ||u||_inf`.
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Threshold for the approximate Jacobian; `None` uses exact blocks.
    pub lump_delta: Option<f64>,
    /// Midpoint-defect driven bisection of time intervals.
    pub adaptive: bool,
    pub defect_tol: f64,
    pub defect_ratio: f64,
    pub max_nodes: usize,
    pub max_refine_rounds: usize,
}

impl Default for BvpOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-8,
            max_newton: 16,
            lump_delta: None,
            adaptive: true,
            defect_tol: 1e-4,
            defect_ratio: 10.0,
            max_nodes: 2000,
            max_refine_rounds: 8,
        }
    }
}

/// Assembly context for one boundary value problem family (fixed system,
/// target, projection, and left-boundary homotopy line).
pub struct Collocation<'a> {
    pub sys: &'a SystemOps,
    pub psi: &'a Array2<f64>,
    pub u_hat: Array1<f64>,
    pub p_zero: Array1<f64>,
    pub p_one: Array1<f64>,
    lumped: Option<Array2<f64>>,
}

impl<'a> Collocation<'a> {
    pub fn new(
        sys: &'a SystemOps,
        psi: &'a Array2<f64>,
        u_hat: Array1<f64>,
        p_zero: Array1<f64>,
        p_one: Array1<f64>,
        lump_delta: Option<f64>,
    ) -> Self {
        let lumped = lump_delta.map(|d| sys.fem.lumped_product(d));
        Self { sys, psi, u_hat, p_zero, p_one, lumped }
    }

    fn n(&self) -> usize {
        self.sys.n()
    }

    fn left_target(&self, alpha: f64) -> Array1<f64> {
        let mut v = Array1::zeros(self.n());
        for i in 0..self.n() {
            v[i] = alpha * self.p_one[i] + (1.0 - alpha) * self.p_zero[i];
        }
        v
    }

    /// Residual components: left BC, mass-scaled collocation rows, right BC.
    /// The scaled rows make the convergence measure pointwise meaningful and
    /// independent of the Jacobian mode.
    fn residual(
        &self,
        t: &[f64],
        u: &Array2<f64>,
        alpha: f64,
    ) -> Result<(Array1<f64>, Array2<f64>, Array1<f64>)> {
        let n = self.n();
        let m = t.len() - 1;
        let mut g_nodes: Vec<Array1<f64>> = Vec::with_capacity(m + 1);
        for j in 0..=m {
            let state = CanonicalState::new(u.row(j).to_owned())?;
            g_nodes.push(self.sys.residual(&state)?);
        }
        let mut colloc = Array2::zeros((m, 2 * n));
        for j in 0..m {
            let h = t[j + 1] - t[j];
            let du = &u.row(j + 1).to_owned() - &u.row(j).to_owned();
            let mdu = self.sys.mass_apply_block(du.view());
            let raw = &mdu.mapv(|v| v / h) + &(&g_nodes[j] + &g_nodes[j + 1]).mapv(|v| 0.5 * v);
            let scaled = self.sys.mass_solve_block(raw.view());
            colloc.row_mut(j).assign(&scaled);
        }
        let target = self.left_target(alpha);
        let mut bc_l = Array1::zeros(n);
        for i in 0..n {
            bc_l[i] = u[[0, i]] - target[i];
        }
        let du_end = &u.row(m).to_owned() - &self.u_hat;
        let bc_r = self.psi.dot(&du_end);
        Ok((bc_l, colloc, bc_r))
    }

    fn residual_norm(bc_l: &Array1<f64>, colloc: &Array2<f64>, bc_r: &Array1<f64>) -> f64 {
        let a = bc_l.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let b = colloc.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let c = bc_r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        a.max(b).max(c)
    }

    /// Writes the Jacobian block `sign * M_b/h + dG(u_node)/2` (exact mode)
    /// or its mass-scaled lumped counterpart into `panel` at column offset
    /// `col0`.
    fn fill_block(
        &self,
        panel: &mut PanelBuf,
        col0: usize,
        node: &CanonicalState,
        h: f64,
        sign: f64,
        row0: usize,
    ) -> Result<()> {
        let n = self.n();
        let d = self.sys.params.d;
        let blocks = self.sys.nodal_jacobian(node, self.sys.params.b)?;
        match &self.lumped {
            None => {
                let mass = &self.sys.fem.mass;
                let stiff = &self.sys.fem.stiffness;
                for i in 0..n {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 2).min(n);
                    for c in lo..hi {
                        let mv = mass.get(i, c);
                        let kv = stiff.get(i, c);
                        let a = &blocks[c];
                        // P row
                        panel.add(row0 + i, col0 + c, sign * mv / h + 0.5 * (d * kv - mv * a[0]));
                        panel.add(row0 + i, col0 + n + c, 0.5 * (-mv * a[1]));
                        // q row
                        panel.add(row0 + n + i, col0 + c, 0.5 * (-mv * a[2]));
                        panel.add(
                            row0 + n + i,
                            col0 + n + c,
                            sign * mv / h + 0.5 * (-d * kv - mv * a[3]),
                        );
                    }
                }
            }
            Some(a_thr) => {
                for i in 0..n {
                    for c in 0..n {
                        let av = a_thr[[i, c]];
                        if av != 0.0 {
                            panel.add(row0 + i, col0 + c, 0.5 * d * av);
                            panel.add(row0 + n + i, col0 + n + c, -0.5 * d * av);
                        }
                    }
                    let a = &blocks[i];
                    panel.add(row0 + i, col0 + i, sign / h - 0.5 * a[0]);
                    panel.add(row0 + i, col0 + n + i, -0.5 * a[1]);
                    panel.add(row0 + n + i, col0 + i, -0.5 * a[2]);
                    panel.add(row0 + n + i, col0 + n + i, sign / h - 0.5 * a[3]);
                }
            }
        }
        Ok(())
    }

    /// Collocation rhs rows in the Jacobian's own scaling (`-r_j`, either
    /// mass-weighted or mass-scaled to match the block mode).
    fn jac_rhs_rows(&self, colloc_scaled: &Array2<f64>, j: usize) -> Array1<f64> {
        let row = colloc_scaled.row(j).to_owned();
        match &self.lumped {
            None => self.sys.mass_apply_block(row.view()).mapv(|v| -v),
            Some(_) => row.mapv(|v| -v),
        }
    }
}

/// Dense row-major panel work buffer.
struct PanelBuf {
    rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl PanelBuf {
    fn new(rows: usize, width: usize) -> Self {
        Self { rows, width, data: vec![0.0; rows * width] }
    }

    #[inline]
    fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] += v;
    }

    #[inline]
    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    #[inline]
    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.width..(r + 1) * self.width]
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let w = self.width;
        for c in 0..w {
            self.data.swap(a * w + c, b * w + c);
        }
    }
}

/// Per-interval elimination record: enough to back-substitute and to replay
/// the elimination on a fresh right-hand side.
struct PanelFactor {
    swaps: Vec<usize>,
    /// factors laid out as, for each pivot k, the factors of rows k+1..R-1
    mults: Vec<f64>,
    border_mults: Vec<f64>,
    /// s pivot rows over [u_j | u_{j+1} | alpha]
    pivot_rows: Array2<f64>,
}

/// Factorized almost-block-diagonal Jacobian with optional border.
pub struct AbdFactor {
    s: usize,
    nc: usize,
    m: usize,
    bordered: bool,
    panels: Vec<PanelFactor>,
    /// final dense block over [u_m (s) | alpha?]
    final_mat: Array2<f64>,
    /// final border-row image over [u_m | alpha], when bordered
    carry: Array2<f64>,
}

/// Dense arclength row: weights on every state entry plus the alpha slot.
pub struct BorderRow {
    /// (m+1) x s coefficients
    pub coeff_u: Array2<f64>,
    pub coeff_alpha: f64,
}

/// Factorizes the BVP Jacobian at the given iterate.
#[allow(clippy::too_many_arguments)]
pub fn factor(
    colloc: &Collocation,
    t: &[f64],
    u: &Array2<f64>,
    border: Option<&BorderRow>,
    d_alpha_left: Option<&Array1<f64>>,
) -> Result<AbdFactor> {
    let n = colloc.n();
    let s = 2 * n;
    let nc = n;
    let m = t.len() - 1;
    let rows = nc + s;
    let width = 2 * s + 1; // [u_j | u_{j+1} | alpha]
    let bordered = border.is_some();

    // carry starts as the left BC rows [I 0 | d_alpha | ...]
    let mut carry = Array2::zeros((nc, s + 1));
    for i in 0..n {
        carry[[i, i]] = 1.0;
        if let Some(da) = d_alpha_left {
            carry[[i, s]] = da[i];
        }
    }
    let mut border_u = border.map(|b| b.coeff_u.clone());
    let mut border_alpha = border.map(|b| b.coeff_alpha).unwrap_or(0.0);

    let mut panels = Vec::with_capacity(m);
    for j in 0..m {
        let h = t[j + 1] - t[j];
        let mut panel = PanelBuf::new(rows, width);
        for i in 0..nc {
            for c in 0..s {
                panel.add(i, c, carry[[i, c]]);
            }
            panel.add(i, 2 * s, carry[[i, s]]);
        }
        let uj = CanonicalState::new(u.row(j).to_owned())?;
        let ujp = CanonicalState::new(u.row(j + 1).to_owned())?;
        colloc.fill_block(&mut panel, 0, &uj, h, -1.0, nc)?;
        colloc.fill_block(&mut panel, s, &ujp, h, 1.0, nc)?;

        let mut swaps = Vec::with_capacity(s);
        let mut mults = Vec::new();
        let mut border_mults = vec![0.0; s];
        for k in 0..s {
            // partial pivoting among the panel rows
            let mut piv_row = k;
            let mut piv_val = panel.row(k)[k].abs();
            for i in k + 1..rows {
                let v = panel.row(i)[k].abs();
                if v > piv_val {
                    piv_val = v;
                    piv_row = i;
                }
            }
            if piv_val < 1e-300 {
                return Err(Error::LinearSolve(format!(
                    "singular collocation panel at interval {j}, column {k}"
                )));
            }
            panel.swap_rows(k, piv_row);
            swaps.push(piv_row);
            let piv = panel.row(k)[k];
            for i in k + 1..rows {
                let f = panel.row(i)[k] / piv;
                mults.push(f);
                if f != 0.0 {
                    let (head, tail) = panel.data.split_at_mut(i * width);
                    let pivot_slice = &head[k * width + k..k * width + width];
                    let target = &mut tail[k..width];
                    for (tv, pv) in target.iter_mut().zip(pivot_slice.iter()) {
                        *tv -= f * pv;
                    }
                }
            }
            if let Some(bu) = border_u.as_mut() {
                // border row's u_j block lives at bu.row(j)
                let f = bu[[j, k]] / piv;
                border_mults[k] = f;
                if f != 0.0 {
                    let prow = panel.row(k);
                    for c in k..s {
                        bu[[j, c]] -= f * prow[c];
                    }
                    for c in 0..s {
                        bu[[j + 1, c]] -= f * prow[s + c];
                    }
                    border_alpha -= f * prow[2 * s];
                }
            }
        }
        // store pivot rows and the carried-out rows
        let mut pivot_rows = Array2::zeros((s, width));
        for k in 0..s {
            for c in 0..width {
                pivot_rows[[k, c]] = panel.row(k)[c];
            }
        }
        let mut new_carry = Array2::zeros((nc, s + 1));
        for i in 0..nc {
            let rowi = panel.row(s + i);
            for c in 0..s {
                new_carry[[i, c]] = rowi[s + c];
            }
            new_carry[[i, s]] = rowi[2 * s];
        }
        carry = new_carry;
        panels.push(PanelFactor { swaps, mults, border_mults, pivot_rows });
    }

    // final dense block: carry rows + right BC rows (+ border row)
    let extra = usize::from(bordered);
    let size = s + extra;
    let mut final_mat = Array2::zeros((size, size));
    for i in 0..nc {
        for c in 0..s {
            final_mat[[i, c]] = carry[[i, c]];
        }
        if bordered {
            final_mat[[i, s]] = carry[[i, s]];
        }
    }
    for i in 0..n {
        for c in 0..s {
            final_mat[[nc + i, c]] = colloc.psi[[i, c]];
        }
    }
    if let Some(bu) = border_u.as_ref() {
        for c in 0..s {
            final_mat[[s, c]] = bu[[m, c]];
        }
        final_mat[[s, s]] = border_alpha;
    }
    Ok(AbdFactor { s, nc, m, bordered, panels, final_mat, carry })
}

impl AbdFactor {
    /// Solves for the Newton correction given the residual pieces; returns
    /// the state corrections (one row per time node) and the alpha
    /// correction (zero when not bordered).
    pub fn solve(
        &self,
        bc_l: &Array1<f64>,
        colloc_rhs_rows: &[Array1<f64>],
        bc_r: &Array1<f64>,
        border_rhs: f64,
    ) -> Result<(Array2<f64>, f64)> {
        let (s, nc, m) = (self.s, self.nc, self.m);
        let rows = nc + s;
        let mut carry_rhs: Vec<f64> = bc_l.iter().map(|v| -v).collect();
        let mut border_acc = border_rhs;
        let mut pivot_rhs: Vec<Vec<f64>> = Vec::with_capacity(m);
        for j in 0..m {
            let mut b = vec![0.0; rows];
            b[..nc].copy_from_slice(&carry_rhs);
            for i in 0..s {
                b[nc + i] = colloc_rhs_rows[j][i];
            }
            let pf = &self.panels[j];
            let mut mi = 0;
            for k in 0..s {
                b.swap(k, pf.swaps[k]);
                for i in k + 1..rows {
                    let f = pf.mults[mi];
                    mi += 1;
                    if f != 0.0 {
                        b[i] -= f * b[k];
                    }
                }
                if self.bordered {
                    border_acc -= pf.border_mults[k] * b[k];
                }
            }
            carry_rhs = b[s..].to_vec();
            pivot_rhs.push(b[..s].to_vec());
        }

        // final dense solve for (u_m, alpha)
        let extra = usize::from(self.bordered);
        let size = s + extra;
        let mut rhs = Array1::zeros(size);
        for i in 0..nc {
            rhs[i] = carry_rhs[i];
        }
        for i in 0..(s - nc) {
            rhs[nc + i] = -bc_r[i];
        }
        if self.bordered {
            rhs[s] = border_acc;
        }
        let xm = self
            .final_mat
            .solve(&rhs)
            .map_err(|e| Error::LinearSolve(format!("terminal block: {e}")))?;
        let d_alpha = if self.bordered { xm[s] } else { 0.0 };

        let mut delta = Array2::zeros((m + 1, s));
        for c in 0..s {
            delta[[m, c]] = xm[c];
        }
        for j in (0..m).rev() {
            for k in (0..s).rev() {
                let prow = self.panels[j].pivot_rows.row(k);
                let mut v = pivot_rhs[j][k];
                for c in k + 1..s {
                    v -= prow[c] * delta[[j, c]];
                }
                for c in 0..s {
                    v -= prow[s + c] * delta[[j + 1, c]];
                }
                v -= prow[2 * s] * d_alpha;
                delta[[j, k]] = v / prow[k];
            }
        }
        let _ = &self.carry;
        Ok((delta, d_alpha))
    }
}

/// Converged collocation solution on its (possibly refined) mesh.
#[derive(Debug, Clone)]
pub struct BvpOutput {
    pub t: Vec<f64>,
    pub u: Array2<f64>,
    pub alpha: f64,
    pub residual_norm: f64,
    pub newton_iters: usize,
}

fn u_scale(u: &Array2<f64>) -> f64 {
    1.0 + u.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn admissible(u: &Array2<f64>, n: usize) -> bool {
    let m1 = u.nrows();
    for j in 0..m1 {
        for i in n..2 * n {
            if !(u[[j, i]] < 0.0) {
                return false;
            }
        }
    }
    true
}

/// Newton iteration at fixed alpha on a fixed mesh.
fn newton_fixed(
    colloc: &Collocation,
    t: &[f64],
    u0: &Array2<f64>,
    alpha: f64,
    opts: &BvpOptions,
) -> Result<(Array2<f64>, f64, usize)> {
    let n = colloc.n();
    let m = t.len() - 1;
    let mut u = u0.clone();
    if !admissible(&u, n) {
        return Err(Error::CostateSign { index: 0, value: 0.0 });
    }
    let (mut bc_l, mut cols, mut bc_r) = colloc.residual(t, &u, alpha)?;
    let mut rnorm = Collocation::residual_norm(&bc_l, &cols, &bc_r);
    let mut fact: Option<AbdFactor> = None;
    let mut last_rnorm = f64::INFINITY;
    for it in 0..opts.max_newton {
        if rnorm < opts.newton_tol * u_scale(&u) {
            return Ok((u, rnorm, it));
        }
        // refactor unless the frozen Jacobian is still contracting well
        if fact.is_none() || rnorm > 0.25 * last_rnorm {
            fact = Some(factor(colloc, t, &u, None, None)?);
        }
        let f = fact.as_ref().unwrap();
        let rhs_rows: Vec<Array1<f64>> = (0..m).map(|j| colloc.jac_rhs_rows(&cols, j)).collect();
        let (delta, _) = f.solve(&bc_l, &rhs_rows, &bc_r, 0.0)?;
        // step control: keep the costate admissible and the residual from
        // blowing up
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let cand = &u + &delta.mapv(|v| lambda * v);
            if admissible(&cand, n) {
                if let Ok((bl, cl, br)) = colloc.residual(t, &cand, alpha) {
                    let rn = Collocation::residual_norm(&bl, &cl, &br);
                    if rn <= rnorm * (1.0 - 0.1 * lambda) || rn < opts.newton_tol * u_scale(&cand) {
                        u = cand;
                        last_rnorm = rnorm;
                        rnorm = rn;
                        bc_l = bl;
                        cols = cl;
                        bc_r = br;
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDiverged { residual: rnorm });
        }
    }
    if rnorm < opts.newton_tol * u_scale(&u) {
        return Ok((u, rnorm, opts.max_newton));
    }
    Err(Error::NewtonDiverged { residual: rnorm })
}

/// Midpoint defect of the piecewise-linear interpolant per interval,
/// measured in the mass-scaled norm.
fn midpoint_defects(colloc: &Collocation, t: &[f64], u: &Array2<f64>) -> Result<Vec<f64>> {
    let m = t.len() - 1;
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let h = t[j + 1] - t[j];
        let mid = (&u.row(j).to_owned() + &u.row(j + 1).to_owned()).mapv(|v| 0.5 * v);
        let state = CanonicalState::new(mid)?;
        let g = colloc.sys.residual(&state)?;
        let gm = colloc.sys.mass_solve_block(g.view());
        let du = (&u.row(j + 1).to_owned() - &u.row(j).to_owned()).mapv(|v| v / h);
        let d = (&du + &gm).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        out.push(d);
    }
    Ok(out)
}

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s[s.len() / 2]
}

/// Linear interpolation of nodal states onto a new time mesh.
pub fn interp_states(t_src: &[f64], u_src: &Array2<f64>, t_dst: &[f64]) -> Array2<f64> {
    let s = u_src.ncols();
    let mut out = Array2::zeros((t_dst.len(), s));
    let mut k = 0usize;
    for (row, &td) in t_dst.iter().enumerate() {
        while k + 2 < t_src.len() && t_src[k + 1] < td {
            k += 1;
        }
        let (t0, t1) = (t_src[k], t_src[k + 1]);
        let w = ((td - t0) / (t1 - t0)).clamp(0.0, 1.0);
        for c in 0..s {
            out[[row, c]] = (1.0 - w) * u_src[[k, c]] + w * u_src[[k + 1, c]];
        }
    }
    out
}

/// Solves the BVP at fixed alpha with defect-driven mesh refinement:
/// intervals whose midpoint defect exceeds both the absolute tolerance and
/// `defect_ratio` times the median are split until the defect test passes
/// or the node budget is reached.
pub fn solve_fixed(
    colloc: &Collocation,
    t0: &[f64],
    u0: &Array2<f64>,
    alpha: f64,
    opts: &BvpOptions,
) -> Result<BvpOutput> {
    let mut t: Vec<f64> = t0.to_vec();
    let mut guess = u0.clone();
    let mut rounds = 0;
    loop {
        let (u, rnorm, iters) = newton_fixed(colloc, &t, &guess, alpha, opts)?;
        if !opts.adaptive {
            return Ok(BvpOutput { t, u, alpha, residual_norm: rnorm, newton_iters: iters });
        }
        let defects = midpoint_defects(colloc, &t, &u)?;
        let scale = u_scale(&u);
        let med = median(&defects);
        let threshold = (opts.defect_tol * scale).max(opts.defect_ratio * med);
        let worst = defects.iter().fold(0.0f64, |a, v| a.max(*v));
        let needs = worst > threshold && t.len() <= opts.max_nodes && rounds < opts.max_refine_rounds;
        if !needs {
            return Ok(BvpOutput { t, u, alpha, residual_norm: rnorm, newton_iters: iters });
        }
        // split offenders, graded by how far the defect overshoots
        let mut t_new = Vec::with_capacity(t.len() * 2);
        for j in 0..t.len() - 1 {
            t_new.push(t[j]);
            if defects[j] > threshold {
                let parts = ((defects[j] / threshold).sqrt().ceil() as usize).clamp(2, 4);
                for p in 1..parts {
                    t_new.push(t[j] + (t[j + 1] - t[j]) * p as f64 / parts as f64);
                }
            }
        }
        t_new.push(*t.last().unwrap());
        if t_new.len() > opts.max_nodes {
            t_new.truncate(opts.max_nodes);
            // keep the horizon endpoint
            let t_end = *t.last().unwrap();
            if *t_new.last().unwrap() < t_end {
                t_new.push(t_end);
            }
        }
        guess = interp_states(&t, &u, &t_new);
        t = t_new;
        rounds += 1;
    }
}

/// One pseudo-arclength corrector solve for the bordered system, with the
/// homotopy parameter free. `tangent` and the previous point define the
/// constraint plane through the predictor.
#[allow(clippy::too_many_arguments)]
pub fn solve_arclength_step(
    colloc: &Collocation,
    t: &[f64],
    u_pred: &Array2<f64>,
    alpha_pred: f64,
    tangent_u: &Array2<f64>,
    tangent_alpha: f64,
    xi: f64,
    opts: &BvpOptions,
) -> Result<BvpOutput> {
    let n = colloc.n();
    let m = t.len() - 1;
    let mut u = u_pred.clone();
    let mut alpha = alpha_pred;
    if !admissible(&u, n) {
        return Err(Error::CostateSign { index: 0, value: 0.0 });
    }
    let d_alpha_left: Array1<f64> =
        (0..n).map(|i| -(colloc.p_one[i] - colloc.p_zero[i])).collect();
    let border = BorderRow { coeff_u: tangent_u.mapv(|v| xi * v), coeff_alpha: tangent_alpha };

    let (mut bc_l, mut cols, mut bc_r) = colloc.residual(t, &u, alpha)?;
    let mut rnorm = Collocation::residual_norm(&bc_l, &cols, &bc_r);
    let mut fact: Option<AbdFactor> = None;
    let mut last_rnorm = f64::INFINITY;
    for it in 0..opts.max_newton {
        let cons = xi * ((&u - u_pred) * tangent_u).sum() + (alpha - alpha_pred) * tangent_alpha;
        if rnorm < opts.newton_tol * u_scale(&u) && cons.abs() < 1e-10 {
            return Ok(BvpOutput { t: t.to_vec(), u, alpha, residual_norm: rnorm, newton_iters: it });
        }
        if fact.is_none() || rnorm > 0.25 * last_rnorm {
            fact = Some(factor(colloc, t, &u, Some(&border), Some(&d_alpha_left))?);
        }
        let f = fact.as_ref().unwrap();
        let rhs_rows: Vec<Array1<f64>> = (0..m).map(|j| colloc.jac_rhs_rows(&cols, j)).collect();
        let (delta, d_alpha) = f.solve(&bc_l, &rhs_rows, &bc_r, -cons)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let cand = &u + &delta.mapv(|v| lambda * v);
            let cand_alpha = alpha + lambda * d_alpha;
            if admissible(&cand, n) {
                if let Ok((bl, cl, br)) = colloc.residual(t, &cand, cand_alpha) {
                    let rn = Collocation::residual_norm(&bl, &cl, &br);
                    if rn <= rnorm * (1.0 - 0.1 * lambda)
                        || rn < opts.newton_tol * u_scale(&cand)
                    {
                        u = cand;
                        alpha = cand_alpha;
                        last_rnorm = rnorm;
                        rnorm = rn;
                        bc_l = bl;
                        cols = cl;
                        bc_r = br;
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDiverged { residual: rnorm });
        }
    }
    Err(Error::NewtonDiverged { residual: rnorm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::css;
    use crate::fem::Mesh1d;
    use crate::model::ModelParams;
    use crate::spectral;
    use approx::assert_relative_eq;

    const L: f64 = 2.0 * std::f64::consts::PI / 0.44;

    fn setup(b: f64, n: usize) -> SystemOps {
        let params = ModelParams::new(0.03, 0.5, b, 0.5).unwrap();
        SystemOps::new(params, Mesh1d::uniform(L, n).unwrap())
    }

    fn uniform_mesh(t_end: f64, m: usize) -> Vec<f64> {
        (0..=m).map(|i| t_end * i as f64 / m as f64).collect()
    }

    #[test]
    fn constant_path_at_equilibrium_is_a_solution() {
        let sys = setup(0.65, 21);
        let fsm = css::flat_css(css::FlatBranch::Muddy, &sys, 0.65, 1e-10).unwrap();
        let psi = spectral::build_psi(&fsm.state, &sys, 0.65, 1e-8).unwrap();
        let uhat = fsm.state.as_vector().to_owned();
        let colloc = Collocation::new(
            &sys,
            &psi.psi,
            uhat.clone(),
            fsm.state.p().to_owned(),
            fsm.state.p().to_owned(),
            None,
        );
        let t = uniform_mesh(100.0, 20);
        let u0 = Array2::from_shape_fn((21, 42), |(_, c)| uhat[c]);
        let out = solve_fixed(&colloc, &t, &u0, 0.0, &BvpOptions::default()).unwrap();
        assert_eq!(out.newton_iters, 0);
        assert!(out.residual_norm < 1e-10);
        for j in 0..out.u.nrows() {
            for c in 0..42 {
                assert_relative_eq!(out.u[[j, c]], uhat[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn flat_two_point_problem_connects_to_the_muddy_state() {
        // start away from the equilibrium on the flat subspace; the solver
        // must produce an x-independent connecting path
        let sys = setup(0.65, 15);
        let fsm = css::flat_css(css::FlatBranch::Muddy, &sys, 0.65, 1e-10).unwrap();
        let psi = spectral::build_psi(&fsm.state, &sys, 0.65, 1e-8).unwrap();
        let uhat = fsm.state.as_vector().to_owned();
        let n = 15;
        let p_start = Array1::from_elem(n, 1.2);
        let colloc = Collocation::new(
            &sys,
            &psi.psi,
            uhat.clone(),
            fsm.state.p().to_owned(),
            p_start,
            None,
        );
        let t = uniform_mesh(100.0, 20);
        let u0 = Array2::from_shape_fn((21, 2 * n), |(_, c)| uhat[c]);
        let out = solve_fixed(&colloc, &t, &u0, 1.0, &BvpOptions::default()).unwrap();
        // left BC enforced
        for i in 0..n {
            assert_relative_eq!(out.u[[0, i]], 1.2, epsilon = 1e-9);
        }
        // x-independence of the whole path
        for j in 0..out.u.nrows() {
            for i in 1..n {
                assert!((out.u[[j, i]] - out.u[[j, 0]]).abs() < 1e-8);
                assert!((out.u[[j, n + i]] - out.u[[j, n]]).abs() < 1e-8);
            }
        }
        // terminal state close to the target
        let m = out.u.nrows() - 1;
        let gap = (0..2 * n)
            .map(|c| (out.u[[m, c]] - uhat[c]).abs())
            .fold(0.0f64, f64::max);
        assert!(gap < 0.05 * (1.0 + uhat.iter().fold(0.0f64, |a, v| a.max(v.abs()))));
    }

    #[test]
    fn lumped_jacobian_reaches_the_same_solution() {
        let sys = setup(0.65, 15);
        let fsm = css::flat_css(css::FlatBranch::Muddy, &sys, 0.65, 1e-10).unwrap();
        let psi = spectral::build_psi(&fsm.state, &sys, 0.65, 1e-8).unwrap();
        let uhat = fsm.state.as_vector().to_owned();
        let n = 15;
        let p_start = Array1::from_elem(n, 1.2);
        let t = uniform_mesh(100.0, 20);
        let u0 = Array2::from_shape_fn((21, 2 * n), |(_, c)| uhat[c]);
        let mut opts = BvpOptions::default();
        opts.adaptive = false;
        let exact = {
            let colloc = Collocation::new(
                &sys,
                &psi.psi,
                uhat.clone(),
                fsm.state.p().to_owned(),
                p_start.clone(),
                None,
            );
            solve_fixed(&colloc, &t, &u0, 0.5, &opts).unwrap()
        };
        let lumped = {
            let colloc = Collocation::new(
                &sys,
                &psi.psi,
                uhat.clone(),
                fsm.state.p().to_owned(),
                p_start,
                Some(1e-6),
            );
            solve_fixed(&colloc, &t, &u0, 0.5, &opts).unwrap()
        };
        let diff = (&exact.u - &lumped.u).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-7, "lumped/exact mismatch {diff:.2e}");
    }
}
