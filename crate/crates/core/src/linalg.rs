//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const EIGEN_EPS: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 10_000;

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// The input is symmetrized first so that round-off asymmetry in products
/// such as `Q D Qᵀ` does not leak into the solver.
pub fn sym_eigen(m: &Matrix) -> (Vector, Matrix) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::try_new(sym.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
        .unwrap_or_else(|| SymmetricEigen::new(sym));
    let d = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = Vector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = Matrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Off-diagonal Frobenius norm.
pub fn off_diagonal_norm(m: &Matrix) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j {
                acc += m[(i, j)] * m[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// True when the off-diagonal mass is negligible relative to the whole matrix.
pub fn is_diagonal(m: &Matrix) -> bool {
    let total = m.norm();
    total == 0.0 || off_diagonal_norm(m) < 1e-10 * total
}

pub fn relative_frobenius(a: &Matrix, reference: &Matrix) -> f64 {
    let denom = reference.norm();
    if denom == 0.0 {
        (a - reference).norm()
    } else {
        (a - reference).norm() / denom
    }
}

pub fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Column-major fill, so the draw order is fixed for a given stream.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)),
    )
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
pub fn haar_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Matrix {
    let g = gaussian_matrix(d, d, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// A Haar-distributed orthogonal matrix stored as `d` Householder reflectors,
/// `U = H_0 · diag(1, H_1 · diag(1, …))`, where the first column of each
/// block is uniform on its sphere. Applying it costs `O(d²)` without forming `U`.
#[derive(Debug, Clone)]
pub struct HaarRotation {
    /// Reflector `k` acts on coordinates `k..d`; `None` means identity.
    reflectors: Vec<Option<Vector>>,
}

impl HaarRotation {
    pub fn sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let reflectors = (0..d)
            .map(|k| {
                let x = gaussian_vector(d - k, rng);
                let norm = x.norm();
                if norm == 0.0 {
                    return None;
                }
                // u ∝ e₁ − x/‖x‖, so the reflector maps e₁ to x/‖x‖.
                let mut u = -x / norm;
                u[0] += 1.0;
                let n = u.norm();
                (n > 0.0).then(|| u / n)
            })
            .collect();
        Self { reflectors }
    }

    pub fn dim(&self) -> usize {
        self.reflectors.len()
    }

    fn reflect(u: &Vector, y: &mut Vector, k: usize) {
        let mut tail = y.rows_mut(k, u.len());
        let dot = u.dot(&tail);
        tail.axpy(-2.0 * dot, u, 1.0);
    }

    /// `U z`.
    pub fn apply(&self, z: &Vector) -> Vector {
        let mut y = z.clone();
        for (k, u) in self.reflectors.iter().enumerate().rev() {
            if let Some(u) = u {
                Self::reflect(u, &mut y, k);
            }
        }
        y
    }

    /// `Uᵀ z`.
    pub fn apply_transpose(&self, z: &Vector) -> Vector {
        let mut y = z.clone();
        for (k, u) in self.reflectors.iter().enumerate() {
            if let Some(u) = u {
                Self::reflect(u, &mut y, k);
            }
        }
        y
    }

    pub fn to_matrix(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        for j in 0..d {
            let mut e = Vector::zeros(d);
            e[j] = 1.0;
            m.set_column(j, &self.apply(&e));
        }
        m
    }
}

/// `V diag(f(λ)) Vᵀ` for a symmetric matrix given by its eigenpairs.
pub fn spectral_map(eigvals: &Vector, eigvecs: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let scaled = Matrix::from_fn(eigvecs.nrows(), eigvecs.ncols(), |i, j| {
        eigvecs[(i, j)] * f(eigvals[j])
    });
    &scaled * eigvecs.transpose()
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix; eigenvalues below
/// `rel_tol · λ_max` are treated as zero. Also returns the numerical rank.
pub fn psd_pseudo_inverse(m: &Matrix, rel_tol: f64) -> (Matrix, usize) {
    let (vals, vecs) = sym_eigen(m);
    let top = vals.iter().copied().fold(0.0_f64, f64::max);
    let cut = rel_tol * top;
    let rank = vals.iter().filter(|&&v| v > cut).count();
    let pinv = spectral_map(&vals, &vecs, |v| if v > cut { 1.0 / v } else { 0.0 });
    (pinv, rank)
}

pub fn outer(v: &Vector) -> Matrix {
    v * v.transpose()
}
