//! Second moment of a compressed random vector, `𝔈(C, M) = E[C(E) C(E)ᵀ]`
//! for `E` with second moment `M`: closed forms, Monte-Carlo estimates and
//! the trace diagnostic `Tr(𝔈 M⁻¹)`.

use rand::Rng;
use rayon::prelude::*;

use crate::compressors::{calibrate_for_omega, compress, CompressorKind, CompressorSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::model::CovarianceModel;
use crate::rng::{stream, Role, StreamKey, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct CompCovResult {
    pub matrix: Matrix,
    /// Only the quantization formula is an upper bound (in the PSD order)
    /// rather than an identity.
    pub is_upper_bound: bool,
}

/// `α = (h+2)/(d+2)` and `β = (d−h)/((d−1)(d+2))` of the Gaussian sketch.
pub fn sketch_coefficients(d: usize, h: usize) -> (f64, f64) {
    if d == 1 {
        return (1.0, 0.0);
    }
    let (df, hf) = (d as f64, h as f64);
    ((hf + 2.0) / (df + 2.0), (df - hf) / ((df - 1.0) * (df + 2.0)))
}

/// `(h−1)/(d−1)`, taken as 1 when `d = 1`.
fn rand_h_ratio(d: usize, h: usize) -> f64 {
    if d == 1 {
        1.0
    } else {
        (h as f64 - 1.0) / (d as f64 - 1.0)
    }
}

/// Closed form of `𝔈(C, M)` on a bare symmetric matrix.
pub fn analytical_covariance_matrix(spec: &CompressorSpec, m: &Matrix) -> Result<CompCovResult> {
    let d = m.nrows();
    spec.validate(d)?;
    let diag = Matrix::from_diagonal(&m.diagonal());
    let exact = |matrix: Matrix| {
        Ok(CompCovResult {
            matrix,
            is_upper_bound: false,
        })
    };
    match *spec {
        CompressorSpec::Identity => exact(m.clone()),
        CompressorSpec::QuantizeS { s: 1 } => {
            let root_trace = m.trace().max(0.0).sqrt();
            let mut out = m.clone();
            for i in 0..d {
                let mii = m[(i, i)].max(0.0);
                out[(i, i)] += root_trace * mii.sqrt() - mii;
            }
            Ok(CompCovResult {
                matrix: out,
                is_upper_bound: true,
            })
        }
        CompressorSpec::QuantizeS { .. } | CompressorSpec::StabilizedQuantize { .. } => Err(
            Error::UnsupportedFormula(spec.label()),
        ),
        CompressorSpec::Sparsify { p } => exact(m + diag * ((1.0 - p) / p)),
        CompressorSpec::PartialParticipation { p } => exact(m / p),
        CompressorSpec::RandH { h } => {
            let p = h as f64 / d as f64;
            let r = rand_h_ratio(d, h);
            exact((m * r + diag * (1.0 - r)) / p)
        }
        CompressorSpec::SketchGaussian { h } => {
            let p = h as f64 / d as f64;
            let (alpha, beta) = sketch_coefficients(d, h);
            let id = Matrix::identity(d, d) * (beta * m.trace());
            exact((m * (alpha - beta) + id) / p)
        }
    }
}

pub fn analytical_covariance(spec: &CompressorSpec, m: &CovarianceModel) -> Result<CompCovResult> {
    analytical_covariance_matrix(spec, m.matrix())
}

/// `(1/n) Σ C(eⱼ) C(eⱼ)ᵀ` with `eⱼ` drawn by `sampler`.
pub fn empirical_covariance<R, F>(spec: &CompressorSpec, mut sampler: F, n_samples: usize, rng: &mut R) -> Matrix
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Vector,
{
    assert!(n_samples >= 1, "n_samples must be >= 1");
    let first = sampler(rng);
    let d = first.len();
    let mut acc = Matrix::zeros(d, d);
    let c = compress(spec, &first, rng);
    acc.ger(1.0, &c, &c, 1.0);
    for _ in 1..n_samples {
        let e = sampler(rng);
        let c = compress(spec, &e, rng);
        acc.ger(1.0, &c, &c, 1.0);
    }
    acc / n_samples as f64
}

/// Monte-Carlo estimate with a batch-based standard error.
#[derive(Debug, Clone)]
pub struct McEstimate {
    pub mean: Matrix,
    /// Frobenius norm of the entrywise standard errors of `mean`.
    pub frobenius_se: f64,
}

/// [`empirical_covariance`] split into `n_batches` independent streams,
/// evaluated in parallel and reduced in batch order.
pub fn empirical_covariance_mc<F>(
    spec: &CompressorSpec,
    sampler: F,
    n_samples: usize,
    n_batches: usize,
    seed: u64,
) -> McEstimate
where
    F: Fn(&mut StreamRng) -> Vector + Sync,
{
    assert!(n_batches >= 2 && n_samples >= n_batches);
    let per = n_samples / n_batches;
    let batches: Vec<Matrix> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, StreamKey::new(b as u32, 0, Role::MonteCarlo));
            empirical_covariance(spec, &sampler, per, &mut rng)
        })
        .collect();
    batch_summary(&batches)
}

pub fn batch_summary(batches: &[Matrix]) -> McEstimate {
    let nb = batches.len() as f64;
    let mut mean = batches[0].clone() * 0.0;
    for b in batches {
        mean += b;
    }
    mean /= nb;
    let mut var = mean.clone() * 0.0;
    for b in batches {
        let dev = b - &mean;
        var += dev.component_mul(&dev);
    }
    var /= nb - 1.0;
    McEstimate {
        frobenius_se: (var.sum() / nb).sqrt(),
        mean,
    }
}

/// `Tr(cov · M⁻¹)` through the eigenpairs of `M`.
pub fn trace_diagnostic(cov: &CompCovResult, m: &CovarianceModel) -> Result<f64> {
    m.ensure_invertible()?;
    let v = m.eigvecs();
    let rotated = v.transpose() * &cov.matrix * v;
    Ok((0..m.dim()).map(|k| rotated[(k, k)] / m.eigvals()[k]).sum())
}

/// `Sha_H`: a scalar with `𝔈(C, H) ⪯ Sha_H · H`, from the linear-compressor table.
pub fn sha_constant(spec: &CompressorSpec, m: &CovarianceModel) -> Result<f64> {
    if !spec.is_linear() {
        return Err(Error::UnsupportedFormula(format!(
            "Sha_H is defined for linear compressors only, got {}",
            spec.label()
        )));
    }
    let d = m.dim();
    spec.validate(d)?;
    m.ensure_invertible()?;
    let tau = m.trace() / m.mu();
    let diagonal = m.is_diagonal();
    Ok(match *spec {
        CompressorSpec::Identity => 1.0,
        CompressorSpec::PartialParticipation { p } => 1.0 / p,
        CompressorSpec::Sparsify { p } if diagonal => 1.0 / p,
        CompressorSpec::Sparsify { p } => 1.0 + (1.0 - p) * tau / p,
        CompressorSpec::RandH { h } => {
            let p = h as f64 / d as f64;
            if diagonal {
                1.0 / p
            } else {
                let r = rand_h_ratio(d, h);
                r / p + (1.0 - r) * tau / p
            }
        }
        CompressorSpec::SketchGaussian { h } => {
            let p = h as f64 / d as f64;
            let (alpha, beta) = sketch_coefficients(d, h);
            (alpha - beta) / p + beta * tau / p
        }
        CompressorSpec::QuantizeS { .. } | CompressorSpec::StabilizedQuantize { .. } => {
            unreachable!("non-linear kinds rejected above")
        }
    })
}

/// Calibrates every kind to `omega`, evaluates `Tr(𝔈(C, M) M⁻¹)` and returns
/// the pairs sorted by increasing trace.
pub fn compare_traces(
    kinds: &[CompressorKind],
    m: &CovarianceModel,
    omega: f64,
) -> Result<Vec<(CompressorSpec, f64)>> {
    let mut out = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let spec = calibrate_for_omega(kind, m.dim(), omega)?;
        let cov = analytical_covariance(&spec, m)?;
        out.push((spec, trace_diagnostic(&cov, m)?));
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(out)
}

/// `𝔈(C₁ ∘ C₂, M) = 𝔈(C₁, 𝔈(C₂, M))`, i.e. `inner` is applied first.
pub fn compose_covariance(
    outer: &CompressorSpec,
    inner: &CompressorSpec,
    m: &CovarianceModel,
) -> Result<CompCovResult> {
    for spec in [outer, inner] {
        if !spec.is_linear() {
            return Err(Error::UnsupportedFormula(format!(
                "composition needs linear compressors, got {}",
                spec.label()
            )));
        }
    }
    let mid = analytical_covariance(inner, m)?;
    analytical_covariance_matrix(outer, &mid.matrix)
}

/// Smallest eigenvalue of `bound − estimate`, used for one-sided PSD checks.
pub fn psd_margin(bound: &Matrix, estimate: &Matrix) -> f64 {
    linalg::min_eigenvalue(&(bound - estimate))
}
