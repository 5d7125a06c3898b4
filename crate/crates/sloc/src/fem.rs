//! 1D linear finite elements on an interval with Neumann boundary
//! conditions: mesh, mass and stiffness matrices, quadrature, and the
//! normalized norms and averages used throughout the bifurcation diagrams.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};

/// Node coordinates spanning `[-L, L]`.
#[derive(Debug, Clone)]
pub struct Mesh1d {
    half_len: f64,
    nodes: Vec<f64>,
}

impl Mesh1d {
    /// Uniform mesh with `n >= 3` nodes on `(-l, l)`.
    pub fn uniform(l: f64, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidInput(format!("mesh needs n >= 3 nodes, got {n}")));
        }
        if !(l > 0.0) {
            return Err(Error::InvalidInput(format!("half-domain length must be positive, got {l}")));
        }
        let h = 2.0 * l / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|i| -l + h * i as f64).collect();
        // pin the endpoints exactly
        nodes[0] = -l;
        nodes[n - 1] = l;
        Ok(Self { half_len: l, nodes })
    }

    /// Mesh with the same endpoints and `2n - 1` nodes (every element bisected).
    pub fn refined(&self) -> Self {
        let mut nodes = Vec::with_capacity(2 * self.nodes.len() - 1);
        for w in self.nodes.windows(2) {
            nodes.push(w[0]);
            nodes.push(0.5 * (w[0] + w[1]));
        }
        nodes.push(*self.nodes.last().unwrap());
        Self { half_len: self.half_len, nodes }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn half_len(&self) -> f64 {
        self.half_len
    }

    /// Domain size `|Omega| = 2L`.
    pub fn domain_len(&self) -> f64 {
        2.0 * self.half_len
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
}

/// Symmetric tridiagonal matrix; `off[i]` couples nodes `i` and `i + 1`.
#[derive(Debug, Clone)]
pub struct TriMat {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl TriMat {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let n = self.n();
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                v += self.off[i] * x[i + 1];
            }
            y[i] = v;
        }
        y
    }

    /// Entry (i, j); zero off the three bands.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else if i + 1 == j {
            self.off[i]
        } else if j + 1 == i {
            self.off[j]
        } else {
            0.0
        }
    }
}

/// LDL^T factorization of a symmetric positive-definite tridiagonal matrix.
#[derive(Debug, Clone)]
struct TriLdl {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl TriLdl {
    fn factor(m: &TriMat) -> Self {
        let n = m.n();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n - 1];
        d[0] = m.diag[0];
        for i in 0..n - 1 {
            l[i] = m.off[i] / d[i];
            d[i + 1] = m.diag[i + 1] - l[i] * l[i] * d[i];
        }
        Self { d, l }
    }

    fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.d.len();
        let mut x = b.to_owned();
        for i in 1..n {
            let c = self.l[i - 1] * x[i - 1];
            x[i] -= c;
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n - 1).rev() {
            let c = self.l[i] * x[i + 1];
            x[i] -= c;
        }
        x
    }
}

/// Assembled mass and stiffness matrices of the linear-element Neumann
/// discretization, plus the mass factorization used for averaged quantities.
///
/// `K` discretizes `-Laplace` (positive semi-definite, constants in the
/// kernel); the consistent mass matrix satisfies `1^T M 1 = |Omega|`.
#[derive(Debug, Clone)]
pub struct FemOps {
    n: usize,
    domain_len: f64,
    pub mass: TriMat,
    pub stiffness: TriMat,
    mass_ldl: TriLdl,
}

impl FemOps {
    pub fn assemble(mesh: &Mesh1d) -> Self {
        let n = mesh.n();
        let mut mass = TriMat { diag: vec![0.0; n], off: vec![0.0; n - 1] };
        let mut stiffness = TriMat { diag: vec![0.0; n], off: vec![0.0; n - 1] };
        for (i, w) in mesh.nodes().windows(2).enumerate() {
            let h = w[1] - w[0];
            mass.diag[i] += h / 3.0;
            mass.diag[i + 1] += h / 3.0;
            mass.off[i] += h / 6.0;
            stiffness.diag[i] += 1.0 / h;
            stiffness.diag[i + 1] += 1.0 / h;
            stiffness.off[i] -= 1.0 / h;
        }
        let mass_ldl = TriLdl::factor(&mass);
        Self { n, domain_len: mesh.domain_len(), mass, stiffness, mass_ldl }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn domain_len(&self) -> f64 {
        self.domain_len
    }

    /// Domain average `<v> = (1^T M v) / |Omega|`.
    pub fn avg(&self, v: ArrayView1<f64>) -> f64 {
        self.mass.apply(v).sum() / self.domain_len
    }

    /// Normalized L2 norm `||v||_2 = sqrt(v^T M v / |Omega|)`, so constants
    /// have norm equal to their absolute value on any domain.
    pub fn normalized_l2(&self, v: ArrayView1<f64>) -> f64 {
        let q = self.mass.apply(v).dot(&v);
        (q.max(0.0) / self.domain_len).sqrt()
    }

    /// Solves `M x = b`.
    pub fn mass_solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        self.mass_ldl.solve(b)
    }

    /// Thresholded `M^{-1} K`: entries of magnitude below `delta` are
    /// dropped. Used only inside approximate BVP Jacobians; residuals always
    /// use the exact `M` and `K`.
    pub fn lumped_product(&self, delta: f64) -> Array2<f64> {
        let n = self.n;
        let mut a = Array2::zeros((n, n));
        let mut col = Array1::zeros(n);
        for j in 0..n {
            col.fill(0.0);
            col[j] = 1.0;
            let kcol = self.stiffness.apply(col.view());
            let acol = self.mass_ldl.solve(kcol.view());
            for i in 0..n {
                if acol[i].abs() >= delta {
                    a[[i, j]] = acol[i];
                }
            }
        }
        a
    }
}

/// Solves a general (nonsymmetric) tridiagonal system with partial pivoting.
///
/// `sub`, `diag`, `sup` are the three bands; pivoting fills one extra
/// superdiagonal, as in the textbook banded LU.
pub fn solve_tridiag(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    debug_assert_eq!(sub.len(), n - 1);
    debug_assert_eq!(sup.len(), n - 1);
    debug_assert_eq!(rhs.len(), n);
    // After elimination row i holds entries at columns i, i+1, i+2:
    // d[i], e[i], f[i]. low[k] is the column-k entry of row k+1 during the
    // sweep.
    let mut d: Vec<f64> = diag.to_vec();
    let mut e = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut low: Vec<f64> = sub.to_vec();
    let mut b: Vec<f64> = rhs.to_vec();
    e[..n - 1].copy_from_slice(sup);

    for k in 0..n - 1 {
        if low[k].abs() > d[k].abs() {
            // rows k and k+1 swap over columns k..k+2
            let row_k = (d[k], e[k], f[k]);
            d[k] = low[k];
            e[k] = d[k + 1];
            f[k] = if k + 1 < n - 1 { e[k + 1] } else { 0.0 };
            low[k] = row_k.0;
            d[k + 1] = row_k.1;
            if k + 1 < n - 1 {
                e[k + 1] = row_k.2;
            }
            b.swap(k, k + 1);
        }
        if d[k] == 0.0 {
            return Err(Error::LinearSolve("singular tridiagonal matrix".into()));
        }
        let m = low[k] / d[k];
        d[k + 1] -= m * e[k];
        if k + 1 < n - 1 {
            e[k + 1] -= m * f[k];
        }
        b[k + 1] -= m * b[k];
    }
    if d[n - 1] == 0.0 {
        return Err(Error::LinearSolve("singular tridiagonal matrix".into()));
    }
    let mut x = vec![0.0; n];
    x[n - 1] = b[n - 1] / d[n - 1];
    if n >= 2 {
        x[n - 2] = (b[n - 2] - e[n - 2] * x[n - 1]) / d[n - 2];
    }
    for k in (0..n.saturating_sub(2)).rev() {
        x[k] = (b[k] - e[k] * x[k + 1] - f[k] * x[k + 2]) / d[k];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array1;

    const L: f64 = 2.0 * std::f64::consts::PI / 0.44;

    #[test]
    fn mesh_construction() {
        let m = Mesh1d::uniform(1.0, 3).unwrap();
        assert_eq!(m.nodes(), &[-1.0, 0.0, 1.0]);
        let m = Mesh1d::uniform(L, 101).unwrap();
        assert_relative_eq!(m.nodes()[1] - m.nodes()[0], 2.0 * L / 100.0, epsilon = 1e-14);
        assert!(Mesh1d::uniform(1.0, 2).is_err());
        assert!(Mesh1d::uniform(-1.0, 5).is_err());
    }

    #[test]
    fn stiffness_stencil_and_kernel() {
        let mesh = Mesh1d::uniform(1.0, 5).unwrap();
        let ops = FemOps::assemble(&mesh);
        let h = 0.5;
        assert_relative_eq!(ops.stiffness.diag[2], 2.0 / h, epsilon = 1e-14);
        assert_relative_eq!(ops.stiffness.off[1], -1.0 / h, epsilon = 1e-14);
        // K * 1 = 0
        let ones = Array1::ones(5);
        let k1 = ops.stiffness.apply(ones.view());
        assert!(k1.iter().all(|v| v.abs() < 1e-14));
        // 1^T M 1 = |Omega|
        let m1 = ops.mass.apply(ones.view());
        assert_relative_eq!(m1.sum(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn averages_and_norms() {
        let mesh = Mesh1d::uniform(L, 101).unwrap();
        let ops = FemOps::assemble(&mesh);
        let c = Array1::from_elem(101, -2.5);
        assert_relative_eq!(ops.avg(c.view()), -2.5, epsilon = 1e-12);
        assert_relative_eq!(ops.normalized_l2(c.view()), 2.5, epsilon = 1e-12);
        let x = Array1::from_vec(mesh.nodes().to_vec());
        assert!(ops.avg(x.view()).abs() < 1e-12);
    }

    #[test]
    fn consistent_mass_quadrature_is_exact_for_linears() {
        // three nodes, spacing h: integral of v^2 for piecewise-linear v
        let mesh = Mesh1d::uniform(1.0, 3).unwrap();
        let ops = FemOps::assemble(&mesh);
        let h = 1.0;
        let (a, b, c) = (0.7, -1.3, 2.1);
        let v = Array1::from_vec(vec![a, b, c]);
        let exact = h / 3.0 * (a * a + a * b + b * b) + h / 3.0 * (b * b + b * c + c * c);
        let quad = ops.mass.apply(v.view()).dot(&v);
        assert_relative_eq!(quad, exact, epsilon = 1e-14);
    }

    #[test]
    fn average_converges_at_second_order() {
        // smooth non-polynomial sample
        let f = |x: f64| (0.3 * x).sin() + 0.2 * (0.7 * x).cos();
        let exact = {
            // antiderivative evaluated on [-L, L]
            let prim = |x: f64| -(0.3 * x).cos() / 0.3 + 0.2 * (0.7 * x).sin() / 0.7;
            (prim(L) - prim(-L)) / (2.0 * L)
        };
        let err = |n: usize| {
            let mesh = Mesh1d::uniform(L, n).unwrap();
            let ops = FemOps::assemble(&mesh);
            let v = Array1::from_iter(mesh.nodes().iter().map(|&x| f(x)));
            (ops.avg(v.view()) - exact).abs()
        };
        let e1 = err(51);
        let e2 = err(101);
        assert!(e2 < e1 * 0.3, "expected ~4x reduction, got {e1:.3e} -> {e2:.3e}");
    }

    #[test]
    fn lumped_product_limits() {
        let mesh = Mesh1d::uniform(L, 31).unwrap();
        let ops = FemOps::assemble(&mesh);
        let exact = ops.lumped_product(0.0);
        // delta = 0: exact dense product, M * A = K
        let n = 31;
        for j in 0..n {
            let col = exact.column(j).to_owned();
            let mcol = ops.mass.apply(col.view());
            for i in 0..n {
                assert_relative_eq!(mcol[i], ops.stiffness.get(i, j), epsilon = 1e-10);
            }
        }
        // delta = infinity: zero matrix
        let zero = ops.lumped_product(f64::INFINITY);
        assert!(zero.iter().all(|v| *v == 0.0));
        // small threshold: strictly sparser than dense
        let thin = ops.lumped_product(1e-6);
        let nnz = thin.iter().filter(|v| **v != 0.0).count();
        let dense_nnz = exact.iter().filter(|v| **v != 0.0).count();
        assert!(nnz < dense_nnz);
        assert!(nnz > 0);
    }

    #[test]
    fn general_tridiagonal_solve_with_pivoting() {
        // a matrix that forces row swaps (tiny diagonal)
        let sub = vec![4.0, 1.0, 2.0];
        let diag = vec![1e-14, 3.0, -2.0, 1.5];
        let sup = vec![2.0, -1.0, 0.5];
        let x_true = vec![1.0, -2.0, 0.5, 3.0];
        let mut rhs = vec![0.0; 4];
        for i in 0..4 {
            rhs[i] = diag[i] * x_true[i];
            if i > 0 {
                rhs[i] += sub[i - 1] * x_true[i - 1];
            }
            if i < 3 {
                rhs[i] += sup[i] * x_true[i + 1];
            }
        }
        let x = solve_tridiag(&sub, &diag, &sup, &rhs).unwrap();
        for i in 0..4 {
            assert_relative_eq!(x[i], x_true[i], epsilon = 1e-9);
        }
    }
}
