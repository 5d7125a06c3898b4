//! Spectrum of a canonical steady state, defect and saddle-point-property
//! classification, and the adjoint unstable-eigenspace projection used as
//! right boundary condition of the connecting-orbit BVP.
//!
//! Stability convention: an eigenvalue `mu` of the generalized problem
//! `-dG/du v = mu M_b v` is stable when `Re mu < 0`. The spectrum of any
//! canonical steady state is symmetric about `Re = r/2`, so the defect
//! `n_s - n` is never positive.

use crate::cansys::{CanonicalState, SystemOps};
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2};
use ndarray_linalg::{Eig, QR};
use num_complex::Complex64;

/// Full generalized spectrum with stability counts.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// All `2n` eigenvalues, sorted by ascending real part.
    pub eigenvalues: Vec<Complex64>,
    pub n_stable: usize,
    pub n_unstable: usize,
    pub n_center: usize,
    /// `n_stable - n`; zero exactly for saddle points.
    pub defect: i32,
    /// Hausdorff distance between the eigenvalue multiset and its
    /// reflection about `Re = r/2`.
    pub symmetry_residual: f64,
}

impl SpectrumReport {
    /// Largest eigenvalue magnitude, used to scale residual tolerances.
    pub fn magnitude(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |a, z| a.max(z.norm()))
    }
}

/// Rows spanning the mass-weighted adjoint unstable eigenspace of a CSS with
/// the saddle point property: `psi (u - uhat) = 0` characterizes the stable
/// eigenspace at the truncation horizon.
#[derive(Debug, Clone)]
pub struct ProjectionPsi {
    /// `n x 2n`, orthonormal rows.
    pub psi: Array2<f64>,
    /// `-Re mu_1` of the slowest stable eigenvalue; `T >= 1/slowest_rate`
    /// is the horizon lower bound.
    pub slowest_rate: f64,
}

fn eig_general(a: &Array2<f64>) -> Result<(Vec<Complex64>, Array2<Complex64>)> {
    let (vals, vecs) = a.eig().map_err(|e| Error::Eigen(format!("{e}")))?;
    Ok((vals.to_vec(), vecs))
}

fn classify(vals: &[Complex64], center_tol: f64) -> (usize, usize, usize) {
    let mut ns = 0;
    let mut nu = 0;
    let mut nc = 0;
    for z in vals {
        if z.re < -center_tol {
            ns += 1;
        } else if z.re > center_tol {
            nu += 1;
        } else {
            nc += 1;
        }
    }
    (ns, nu, nc)
}

/// Hausdorff distance between the multiset and its reflection `z -> r - conj(z)`.
fn symmetry_residual(vals: &[Complex64], r: f64) -> f64 {
    let mut worst = 0.0f64;
    for z in vals {
        let target = Complex64::new(r - z.re, z.im);
        let best = vals
            .iter()
            .map(|w| (w - target).norm())
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    worst
}

/// Dense generalized eigendecomposition of `-dG/du` against the block mass
/// matrix at the given state, with stability counts and the spectrum
/// symmetry check.
pub fn spectrum(
    state: &CanonicalState,
    sys: &SystemOps,
    b: f64,
    center_tol: f64,
) -> Result<SpectrumReport> {
    let bmat = sys.evolution_matrix(state, b)?;
    let (mut vals, _) = eig_general(&bmat)?;
    vals.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    let (n_stable, n_unstable, n_center) = classify(&vals, center_tol);
    let n = state.n();
    let sym = symmetry_residual(&vals, sys.params.r);
    Ok(SpectrumReport {
        eigenvalues: vals,
        n_stable,
        n_unstable,
        n_center,
        defect: n_stable as i32 - n as i32,
        symmetry_residual: sym,
    })
}

/// Saddle point property, decided by two routes that must agree: the defect
/// count `n_s = n`, and the spectral-band criterion that no eigenvalue has
/// real part inside `[0, r]`. Eigenvalues within `center_tol` of either band
/// edge leave the question undecidable and raise an error.
pub fn has_spp(report: &SpectrumReport, r: f64, center_tol: f64) -> Result<bool> {
    for z in &report.eigenvalues {
        if z.re.abs() <= center_tol || (z.re - r).abs() <= center_tol {
            return Err(Error::CenterEigenvalue { re: z.re, tol: center_tol });
        }
    }
    let count_criterion = report.defect == 0 && report.n_center == 0;
    let band_criterion = report
        .eigenvalues
        .iter()
        .all(|z| (z.re - r / 2.0).abs() > r / 2.0);
    if count_criterion != band_criterion {
        return Err(Error::SppCriteriaDisagree { defect: report.defect, band: band_criterion });
    }
    Ok(count_criterion)
}

/// Builds the projection matrix from the generalized adjoint eigenproblem
/// `(-dG/du)^T w = mu M_b w`: the rows are `(M_b w)^T` over a real basis of
/// the unstable adjoint eigenspace, orthonormalized.
pub fn build_psi(
    state: &CanonicalState,
    sys: &SystemOps,
    b: f64,
    center_tol: f64,
) -> Result<ProjectionPsi> {
    let n = state.n();
    let nn = 2 * n;
    let j = sys.jacobian_dense(state, b)?;
    // B_left = M_b^{-1} (-J)^T
    let mut bleft = Array2::zeros((nn, nn));
    for c in 0..nn {
        let mut col = Array1::zeros(nn);
        for rrow in 0..nn {
            col[rrow] = -j[[c, rrow]];
        }
        let sol = sys.mass_solve_block(col.view());
        for rrow in 0..nn {
            bleft[[rrow, c]] = sol[rrow];
        }
    }
    let (vals, vecs) = eig_general(&bleft)?;
    let (ns, nu, nc) = classify(&vals, center_tol);
    if nc > 0 {
        let z = vals
            .iter()
            .find(|z| z.re.abs() <= center_tol)
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0));
        return Err(Error::CenterEigenvalue { re: z.re, tol: center_tol });
    }
    if nu != n {
        return Err(Error::NoSpp { defect: ns as i32 - n as i32 });
    }

    // real basis from the unstable adjoint eigenvectors; conjugate pairs
    // contribute their real and imaginary parts once
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut used = vec![false; nn];
    let imag_tol = 1e-9 * (1.0 + vals.iter().fold(0.0f64, |a, z| a.max(z.norm())));
    for i in 0..nn {
        if used[i] || vals[i].re <= center_tol {
            continue;
        }
        used[i] = true;
        let v = vecs.column(i);
        if vals[i].im.abs() <= imag_tol {
            rows.push(v.mapv(|z| z.re));
        } else {
            // mark the conjugate partner as consumed
            let mut best = usize::MAX;
            let mut bestd = f64::INFINITY;
            for k in 0..nn {
                if k == i || used[k] {
                    continue;
                }
                let d = (vals[k] - vals[i].conj()).norm();
                if d < bestd {
                    bestd = d;
                    best = k;
                }
            }
            if best == usize::MAX {
                return Err(Error::Eigen("unpaired complex eigenvalue".into()));
            }
            used[best] = true;
            rows.push(v.mapv(|z| z.re));
            rows.push(v.mapv(|z| z.im));
        }
        if rows.len() >= n {
            break;
        }
    }
    if rows.len() != n {
        return Err(Error::Eigen(format!(
            "expected {n} real basis vectors for the unstable eigenspace, got {}",
            rows.len()
        )));
    }

    // psi rows are M_b-weighted so that biorthogonality annihilates the
    // stable right eigenspace; then orthonormalize (row space unchanged)
    let mut psi_t = Array2::zeros((nn, n));
    for (c, w) in rows.iter().enumerate() {
        let mw = sys.mass_apply_block(w.view());
        for rrow in 0..nn {
            psi_t[[rrow, c]] = mw[rrow];
        }
    }
    let (qmat, rmat) = psi_t.qr().map_err(|e| Error::Eigen(format!("qr: {e}")))?;
    let rmax = (0..n).map(|i| rmat[[i, i]].abs()).fold(0.0f64, f64::max);
    let rmin = (0..n).map(|i| rmat[[i, i]].abs()).fold(f64::INFINITY, f64::min);
    if !(rmin > 1e-12 * rmax) {
        return Err(Error::Eigen("projection rows are rank deficient".into()));
    }
    let psi = qmat.t().to_owned();

    let slowest = vals
        .iter()
        .filter(|z| z.re < -center_tol)
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ProjectionPsi { psi, slowest_rate: -slowest })
}

/// Right eigenvector of the evolution operator for the eigenvalue closest to
/// zero; the approximate kernel direction at a bifurcation, normalized so
/// the state part has unit normalized L2 norm.
pub fn kernel_vector(state: &CanonicalState, sys: &SystemOps, b: f64) -> Result<Array1<f64>> {
    let bmat = sys.evolution_matrix(state, b)?;
    let (vals, vecs) = eig_general(&bmat)?;
    let mut best = 0;
    for (i, z) in vals.iter().enumerate() {
        if z.norm() < vals[best].norm() {
            best = i;
        }
    }
    let v = vecs.column(best);
    let mut phi: Array1<f64> = v.mapv(|z| z.re);
    // near a simple real crossing the imaginary part is numerical noise
    let re_norm = phi.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let im_norm = v.iter().fold(0.0f64, |a, z| a.max(z.im.abs()));
    if im_norm > 1e-6 * (re_norm + im_norm) {
        return Err(Error::Eigen(format!(
            "kernel candidate is complex (eigenvalue {:.3e}+{:.3e}i)",
            vals[best].re, vals[best].im
        )));
    }
    let n = state.n();
    let pnorm = sys.fem.normalized_l2(phi.slice(s![..n]));
    if !(pnorm > 0.0) {
        return Err(Error::Eigen("kernel vector has vanishing state part".into()));
    }
    phi.mapv_inplace(|x| x / pnorm);
    Ok(phi)
}

/// Right stable eigenvectors of the evolution operator (columns), used to
/// verify that the projection annihilates the stable eigenspace.
pub fn stable_right_basis(
    state: &CanonicalState,
    sys: &SystemOps,
    b: f64,
    center_tol: f64,
) -> Result<Array2<Complex64>> {
    let bmat = sys.evolution_matrix(state, b)?;
    let (vals, vecs) = eig_general(&bmat)?;
    let idx: Vec<usize> = (0..vals.len()).filter(|&i| vals[i].re < -center_tol).collect();
    let mut out = Array2::zeros((vals.len(), idx.len()));
    for (c, &i) in idx.iter().enumerate() {
        out.column_mut(c).assign(&vecs.column(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Mesh1d;
    use crate::model::ModelParams;
    use approx::assert_relative_eq;

    const L: f64 = 2.0 * std::f64::consts::PI / 0.44;

    #[test]
    fn zero_diffusion_spectrum_is_nodewise() {
        // with D = 0 every node carries an independent copy of the 0D pair,
        // and each pair sums to r
        let params = ModelParams::new(0.03, 0.5, 0.65, 0.0).unwrap();
        let sys = SystemOps::new(params, Mesh1d::uniform(L, 3).unwrap());
        let u = CanonicalState::flat(0.9, -3.0, 3);
        let rep = spectrum(&u, &sys, 0.65, 1e-8).unwrap();
        assert_eq!(rep.eigenvalues.len(), 6);
        let lo = rep.eigenvalues[0];
        let hi = rep.eigenvalues[5];
        assert_relative_eq!(lo.re + hi.re, 0.03, epsilon = 1e-9);
        for i in 0..3 {
            assert_relative_eq!(rep.eigenvalues[i].re, lo.re, max_relative = 1e-8);
            assert_relative_eq!(rep.eigenvalues[3 + i].re, hi.re, max_relative = 1e-8);
        }
        assert!(rep.symmetry_residual < 1e-8);
    }

    #[test]
    fn synthetic_center_eigenvalue_blocks_spp_decision() {
        let rep = SpectrumReport {
            eigenvalues: vec![
                Complex64::new(-1.0, 0.0),
                Complex64::new(1.03, 0.0),
                Complex64::new(1e-12, 0.0),
                Complex64::new(0.03 - 1e-12, 0.0),
            ],
            n_stable: 1,
            n_unstable: 2,
            n_center: 1,
            defect: -1,
            symmetry_residual: 0.0,
        };
        assert!(matches!(
            has_spp(&rep, 0.03, 1e-8),
            Err(Error::CenterEigenvalue { .. })
        ));
    }

    #[test]
    fn synthetic_disagreement_is_an_error() {
        // counts say saddle, band says no: inconsistent report
        let rep = SpectrumReport {
            eigenvalues: vec![Complex64::new(0.01, 0.0), Complex64::new(0.02, 0.0)],
            n_stable: 1,
            n_unstable: 1,
            n_center: 0,
            defect: 0,
            symmetry_residual: 0.0,
        };
        assert!(matches!(
            has_spp(&rep, 0.03, 1e-8),
            Err(Error::SppCriteriaDisagree { .. })
        ));
    }

    #[test]
    fn saddle_band_criterion_accepts_clean_saddle() {
        let rep = SpectrumReport {
            eigenvalues: vec![Complex64::new(-0.3, 0.0), Complex64::new(0.33, 0.0)],
            n_stable: 1,
            n_unstable: 1,
            n_center: 0,
            defect: 0,
            symmetry_residual: 0.0,
        };
        assert!(has_spp(&rep, 0.03, 1e-8).unwrap());
    }
}
