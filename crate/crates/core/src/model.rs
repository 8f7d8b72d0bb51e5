//! Problem description: feature covariances, clients, the global
//! least-squares objective and its stochastic gradient oracle.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::rng::{stream, Role, StreamKey};

/// Symmetric PSD second-moment matrix together with its eigendecomposition.
///
/// Eigenvalues are stored in descending order. `trace_r2` is `Tr M` and `mu`
/// the smallest eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CovarianceRepr", into = "CovarianceRepr")]
pub struct CovarianceModel {
    matrix: Matrix,
    eigvals: Vector,
    eigvecs: Matrix,
    trace_r2: f64,
    mu: f64,
    // V diag(√λ), maps a standard normal draw to N(0, M).
    factor: Matrix,
}

impl CovarianceModel {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let d = matrix.nrows();
        if d == 0 || matrix.ncols() != d {
            return Err(Error::InvalidDimension(format!(
                "covariance must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDimension("covariance has non-finite entries".into()));
        }
        let asym = (&matrix - matrix.transpose()).norm();
        if asym > 1e-10 * matrix.norm().max(1.0) {
            return Err(Error::InvalidDimension(format!(
                "covariance is not symmetric (asymmetry {asym:e})"
            )));
        }
        let (vals, vecs) = if linalg::off_diagonal_norm(&matrix) == 0.0 {
            exact_diagonal_eigen(&matrix)
        } else {
            linalg::sym_eigen(&matrix)
        };
        let top = vals.iter().copied().fold(0.0_f64, |a, b| a.max(b.abs()));
        if vals.iter().any(|&v| v < -1e-10 * top.max(1e-300)) {
            return Err(Error::InvalidDimension(format!(
                "covariance is not positive semi-definite (min eigenvalue {:e})",
                vals[d - 1]
            )));
        }
        let vals = vals.map(|v| v.max(0.0));
        Ok(Self::assemble(linalg::symmetrize(&matrix), vals, vecs))
    }

    /// Builds `V diag(λ) Vᵀ`; `eigvecs` must be orthogonal.
    pub fn from_eigen(eigvals: Vector, eigvecs: Matrix) -> Result<Self> {
        let d = eigvals.len();
        if d == 0 || eigvecs.nrows() != d || eigvecs.ncols() != d {
            return Err(Error::InvalidDimension("eigenpairs have mismatched sizes".into()));
        }
        if eigvals.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidDimension("eigenvalues must be finite and >= 0".into()));
        }
        let ortho = (eigvecs.transpose() * &eigvecs - Matrix::identity(d, d)).norm();
        if ortho > 1e-10 {
            return Err(Error::InvalidDimension(format!(
                "eigenvectors are not orthogonal (error {ortho:e})"
            )));
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]));
        let vals = Vector::from_iterator(d, order.iter().map(|&i| eigvals[i]));
        let mut vecs = Matrix::zeros(d, d);
        for (dst, &src) in order.iter().enumerate() {
            vecs.set_column(dst, &eigvecs.column(src));
        }
        let matrix = linalg::symmetrize(&linalg::spectral_map(&vals, &vecs, |v| v));
        Ok(Self::assemble(matrix, vals, vecs))
    }

    pub fn identity(d: usize) -> Self {
        Self::diagonal(&vec![1.0; d]).expect("identity is a valid covariance")
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_diagonal(&Vector::from_column_slice(values)))
    }

    fn assemble(matrix: Matrix, eigvals: Vector, eigvecs: Matrix) -> Self {
        let trace_r2 = eigvals.sum();
        let mu = eigvals.iter().copied().fold(f64::INFINITY, f64::min);
        let factor = Matrix::from_fn(eigvecs.nrows(), eigvecs.ncols(), |i, j| {
            eigvecs[(i, j)] * eigvals[j].sqrt()
        });
        Self {
            matrix,
            eigvals,
            eigvecs,
            trace_r2,
            mu,
            factor,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn eigvals(&self) -> &Vector {
        &self.eigvals
    }

    pub fn eigvecs(&self) -> &Matrix {
        &self.eigvecs
    }

    /// `Tr M`, written R² for feature covariances.
    pub fn trace(&self) -> f64 {
        self.trace_r2
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn is_diagonal(&self) -> bool {
        linalg::is_diagonal(&self.matrix)
    }

    /// Treats eigenvalues below `1e-14 · max(1, λ_max)` as zero.
    pub fn is_singular(&self) -> bool {
        self.mu <= 1e-14 * self.eigvals[0].max(1.0)
    }

    pub fn sqrt(&self) -> Matrix {
        linalg::spectral_map(&self.eigvals, &self.eigvecs, f64::sqrt)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        self.ensure_invertible()?;
        Ok(linalg::spectral_map(&self.eigvals, &self.eigvecs, |v| 1.0 / v))
    }

    pub fn ensure_invertible(&self) -> Result<()> {
        if self.is_singular() {
            Err(Error::SingularHessian(self.mu))
        } else {
            Ok(())
        }
    }

    /// `vᵀ M⁻¹ v`, i.e. `‖M^{-1/2} v‖²`.
    pub fn inverse_quadratic(&self, v: &Vector) -> Result<f64> {
        self.ensure_invertible()?;
        let proj = self.eigvecs.transpose() * v;
        Ok(proj
            .iter()
            .zip(self.eigvals.iter())
            .map(|(p, l)| p * p / l)
            .sum())
    }

    /// Writes one draw of `N(0, M)` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, out: &mut Vector, scratch: &mut Vector, rng: &mut R) {
        for g in scratch.iter_mut() {
            *g = rng.sample(StandardNormal);
        }
        self.factor.mul_to(scratch, out);
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let d = self.dim();
        let mut out = Vector::zeros(d);
        let mut scratch = Vector::zeros(d);
        self.sample_into(&mut out, &mut scratch, rng);
        out
    }
}

fn exact_diagonal_eigen(m: &Matrix) -> (Vector, Matrix) {
    let d = m.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| m[(b, b)].total_cmp(&m[(a, a)]));
    let vals = Vector::from_iterator(d, order.iter().map(|&i| m[(i, i)]));
    let mut vecs = Matrix::zeros(d, d);
    for (col, &row) in order.iter().enumerate() {
        vecs[(row, col)] = 1.0;
    }
    (vals, vecs)
}

#[derive(Serialize, Deserialize)]
struct CovarianceRepr {
    dim: usize,
    /// Row-major: one inner array per row.
    matrix: Vec<Vec<f64>>,
    #[serde(default, skip_deserializing)]
    eigvals: Vec<f64>,
    #[serde(default, skip_deserializing)]
    trace_r2: f64,
    #[serde(default, skip_deserializing)]
    mu: f64,
}

impl TryFrom<CovarianceRepr> for CovarianceModel {
    type Error = Error;

    fn try_from(r: CovarianceRepr) -> Result<Self> {
        let m = matrix_from_rows(&r.matrix)?;
        if m.nrows() != r.dim {
            return Err(Error::InvalidDimension(format!(
                "declared dim {} but matrix has {} rows",
                r.dim,
                m.nrows()
            )));
        }
        CovarianceModel::new(m)
    }
}

impl From<CovarianceModel> for CovarianceRepr {
    fn from(c: CovarianceModel) -> Self {
        Self {
            dim: c.dim(),
            matrix: matrix_to_rows(&c.matrix),
            eigvals: c.eigvals.iter().copied().collect(),
            trace_r2: c.trace_r2,
            mu: c.mu,
        }
    }
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::InvalidDimension("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(n, c, |i, j| rows[i][j]))
}

/// One client: feature covariance `Hᵢ`, local optimum `w*ᵢ` and label noise σ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClientRepr", into = "ClientRepr")]
pub struct ClientSpec {
    pub covariance: CovarianceModel,
    pub w_star_local: Vector,
    pub noise_var: f64,
}

impl ClientSpec {
    pub fn new(covariance: CovarianceModel, w_star_local: Vector, noise_var: f64) -> Result<Self> {
        if covariance.dim() != w_star_local.len() {
            return Err(Error::InvalidDimension(format!(
                "covariance is {}-dimensional but w* has length {}",
                covariance.dim(),
                w_star_local.len()
            )));
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::Config(format!("noise variance must be >= 0, got {noise_var}")));
        }
        Ok(Self {
            covariance,
            w_star_local,
            noise_var,
        })
    }

    pub fn dim(&self) -> usize {
        self.covariance.dim()
    }

    /// `∇Fᵢ(w) = Hᵢ (w − w*ᵢ)`.
    pub fn gradient(&self, w: &Vector) -> Vector {
        self.covariance.matrix() * (w - &self.w_star_local)
    }

    /// Draws `x ~ N(0, Hᵢ)` into `x` and returns `y = ⟨x, w*ᵢ⟩ + ε`.
    pub fn sample_into<R: Rng + ?Sized>(&self, x: &mut Vector, scratch: &mut Vector, rng: &mut R) -> f64 {
        self.covariance.sample_into(x, scratch, rng);
        let eps: f64 = rng.sample(StandardNormal);
        x.dot(&self.w_star_local) + self.noise_var.sqrt() * eps
    }
}

#[derive(Serialize, Deserialize)]
struct ClientRepr {
    covariance: CovarianceModel,
    w_star_local: Vec<f64>,
    noise_var: f64,
}

impl TryFrom<ClientRepr> for ClientSpec {
    type Error = Error;
    fn try_from(r: ClientRepr) -> Result<Self> {
        ClientSpec::new(r.covariance, Vector::from_vec(r.w_star_local), r.noise_var)
    }
}

impl From<ClientSpec> for ClientRepr {
    fn from(c: ClientSpec) -> Self {
        Self {
            covariance: c.covariance,
            w_star_local: c.w_star_local.iter().copied().collect(),
            noise_var: c.noise_var,
        }
    }
}

/// The federated least-squares problem `F = (1/N) Σ Fᵢ`.
///
/// `hessian` is the mean of the clients' covariances and `w_star_global`
/// solves `H̄ w = (1/N) Σ Hᵢ w*ᵢ` (minimum-norm when `H̄` is singular).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemRepr", into = "ProblemRepr")]
pub struct ProblemSpec {
    pub clients: Vec<ClientSpec>,
    pub w_star_global: Vector,
    pub hessian: CovarianceModel,
}

impl ProblemSpec {
    pub fn new(clients: Vec<ClientSpec>) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::Config("a problem needs at least one client".into()))?;
        let d = first.dim();
        if clients.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidDimension("clients have different dimensions".into()));
        }
        let n = clients.len() as f64;
        let mut h_bar = Matrix::zeros(d, d);
        let mut rhs = Vector::zeros(d);
        for c in &clients {
            h_bar += c.covariance.matrix();
            rhs += c.covariance.matrix() * &c.w_star_local;
        }
        h_bar /= n;
        rhs /= n;
        let hessian = CovarianceModel::new(h_bar)?;
        let w0 = &first.w_star_local;
        let h0 = first.covariance.matrix();
        // Closed forms when they apply keep w* bit-exact (e.g. a single client).
        let w_star_global = if clients.iter().all(|c| &c.w_star_local == w0) {
            w0.clone()
        } else if clients.iter().all(|c| c.covariance.matrix() == h0) {
            clients.iter().fold(Vector::zeros(d), |acc, c| acc + &c.w_star_local) / n
        } else {
            let (pinv, _) = linalg::psd_pseudo_inverse(hessian.matrix(), 1e-13);
            pinv * rhs
        };
        Ok(Self {
            clients,
            w_star_global,
            hessian,
        })
    }

    /// Single client with `H`, `w*` and σ².
    pub fn centralized(covariance: CovarianceModel, w_star: Vector, noise_var: f64) -> Result<Self> {
        Self::new(vec![ClientSpec::new(covariance, w_star, noise_var)?])
    }

    pub fn dim(&self) -> usize {
        self.hessian.dim()
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    /// R̄² = mean of the clients' traces.
    pub fn mean_trace(&self) -> f64 {
        self.clients.iter().map(|c| c.covariance.trace()).sum::<f64>() / self.n_clients() as f64
    }

    pub fn max_trace(&self) -> f64 {
        self.clients
            .iter()
            .map(|c| c.covariance.trace())
            .fold(0.0, f64::max)
    }

    pub fn gradient(&self, w: &Vector) -> Vector {
        self.hessian.matrix() * (w - &self.w_star_global)
    }

    pub fn shares_w_star(&self, tol: f64) -> bool {
        let w0 = &self.clients[0].w_star_local;
        self.clients
            .iter()
            .all(|c| (&c.w_star_local - w0).norm() <= tol * w0.norm().max(1.0))
    }

    pub fn shares_covariance(&self, tol: f64) -> bool {
        let h0 = self.clients[0].covariance.matrix();
        self.clients
            .iter()
            .all(|c| (c.covariance.matrix() - h0).norm() <= tol * h0.norm().max(1.0))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ProblemRepr {
    clients: Vec<ClientSpec>,
    #[serde(default, skip_deserializing)]
    w_star_global: Vec<f64>,
    #[serde(default, skip_deserializing)]
    hessian: Option<CovarianceModel>,
}

impl TryFrom<ProblemRepr> for ProblemSpec {
    type Error = Error;
    fn try_from(r: ProblemRepr) -> Result<Self> {
        ProblemSpec::new(r.clients)
    }
}

impl From<ProblemSpec> for ProblemRepr {
    fn from(p: ProblemSpec) -> Self {
        Self {
            clients: p.clients,
            w_star_global: p.w_star_global.iter().copied().collect(),
            hessian: Some(p.hessian),
        }
    }
}

/// One observation `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vector,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    Identity,
    RandomOrthogonal,
}

/// `Q diag(1/i^decay) Qᵀ` with `Q = I` or Haar-distributed.
pub fn make_synthetic_covariance(
    d: usize,
    decay_exponent: f64,
    rotation: Rotation,
    seed: u64,
) -> Result<CovarianceModel> {
    if d == 0 {
        return Err(Error::InvalidDimension("d must be at least 1".into()));
    }
    if !(decay_exponent >= 0.0) {
        return Err(Error::Config(format!(
            "decay exponent must be >= 0, got {decay_exponent}"
        )));
    }
    let vals = Vector::from_iterator(d, (1..=d).map(|i| (i as f64).powf(-decay_exponent)));
    let vecs = match rotation {
        Rotation::Identity => Matrix::identity(d, d),
        Rotation::RandomOrthogonal => {
            let mut rng = stream(seed, StreamKey::new(0, 0, Role::Problem));
            linalg::haar_orthogonal(d, &mut rng)
        }
    };
    CovarianceModel::from_eigen(vals, vecs)
}

pub fn sample_observation<R: Rng + ?Sized>(client: &ClientSpec, rng: &mut R) -> Sample {
    let d = client.dim();
    let mut x = Vector::zeros(d);
    let mut scratch = Vector::zeros(d);
    let y = client.sample_into(&mut x, &mut scratch, rng);
    Sample { x, y }
}

/// `F(w) − F(w*) = ½ (w − w*)ᵀ H̄ (w − w*)`.
pub fn excess_loss(problem: &ProblemSpec, w: &Vector) -> f64 {
    let eta = w - &problem.w_star_global;
    let h_eta = problem.hessian.matrix() * &eta;
    (0.5 * eta.dot(&h_eta)).max(0.0)
}

/// `(⟨x, w⟩ − y) x`.
pub fn stochastic_gradient(sample: &Sample, w: &Vector) -> Vector {
    let residual = sample.x.dot(w) - sample.y;
    &sample.x * residual
}
