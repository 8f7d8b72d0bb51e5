//! Closed-form non-asymptotic bounds on `E[F(w̄_{K−1})] − F(w*)` and the
//! noise constants they depend on.

use serde::{Deserialize, Serialize};

use crate::compressors::{profile, CompressorSpec};
use crate::covariance::{analytical_covariance, sha_constant, trace_diagnostic};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{CovarianceModel, ProblemSpec};

/// Kurtosis constant of Gaussian features.
pub const GAUSSIAN_KURTOSIS: f64 = 3.0;

// Relative slack on step-size preconditions, so that γ picked exactly at the
// boundary is not rejected by round-off.
const PRECONDITION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConstants {
    /// Additive second-moment bound `𝒜`.
    pub a: f64,
    /// Hölder constant `ℳ₁`.
    pub m1: f64,
    /// Quadratic constant `ℳ₂`.
    pub m2: f64,
    pub sha_add: Option<f64>,
    pub sha_mult: Option<f64>,
    /// `Tr(C_ania H_F⁻¹)`; an upper bound for quantization.
    pub tr_ania_hinv: f64,
    /// Largest ω and Ω over the clients' compressors.
    pub omega: f64,
    pub omega_holder: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeterogeneityMode {
    CovariateShift,
    ConceptShift,
}

/// `Tr(𝔈(C, H) H⁻¹)`, or `+∞` with a warning when `H` is singular.
fn compressed_trace(spec: &CompressorSpec, h: &CovarianceModel, warnings: &mut Vec<String>) -> Result<f64> {
    let cov = analytical_covariance(spec, h)?;
    match trace_diagnostic(&cov, h) {
        Ok(t) => Ok(t),
        Err(Error::SingularHessian(mu)) => {
            warnings.push(format!(
                "H is singular (mu = {mu:e}); terms divided by mu are infinite"
            ));
            Ok(f64::INFINITY)
        }
        Err(e) => Err(e),
    }
}

fn sha_or_inf(spec: &CompressorSpec, h: &CovarianceModel) -> Result<Option<f64>> {
    if !spec.is_linear() {
        return Ok(None);
    }
    match sha_constant(spec, h) {
        Ok(v) => Ok(Some(v)),
        Err(Error::SingularHessian(_)) => Ok(Some(f64::INFINITY)),
        Err(e) => Err(e),
    }
}

/// Constants for a single client: `𝒜 = (ω+1)R²σ²`, `ℳ₂ = (ω+1)R²`,
/// `ℳ₁ = ΩR²σ`, `Sha_add = σ² Sha_H`, `Sha_mult = R² Sha_H`.
pub fn constants_centralized(problem: &ProblemSpec, spec: &CompressorSpec) -> Result<NoiseConstants> {
    if problem.n_clients() != 1 {
        return Err(Error::Config(format!(
            "centralized constants need one client, got {}",
            problem.n_clients()
        )));
    }
    let client = &problem.clients[0];
    let h = &client.covariance;
    let d = h.dim();
    spec.validate(d)?;
    let prof = profile(spec, d);
    let r2 = h.trace();
    let sigma2 = client.noise_var;
    let mut warnings = Vec::new();
    let tr = sigma2 * compressed_trace(spec, h, &mut warnings)?;
    let sha = sha_or_inf(spec, h)?;
    Ok(NoiseConstants {
        a: (prof.omega + 1.0) * r2 * sigma2,
        m1: prof.omega_holder * r2 * sigma2.sqrt(),
        m2: (prof.omega + 1.0) * r2,
        sha_add: sha.map(|s| sigma2 * s),
        sha_mult: sha.map(|s| r2 * s),
        tr_ania_hinv: tr,
        omega: prof.omega,
        omega_holder: prof.omega_holder,
        warnings,
    })
}

pub fn constants_federated(
    problem: &ProblemSpec,
    specs: &[CompressorSpec],
    mode: HeterogeneityMode,
) -> Result<NoiseConstants> {
    constants_federated_with_kurtosis(problem, specs, mode, GAUSSIAN_KURTOSIS)
}

/// Federated constants. `specs` holds one compressor per client or a single
/// shared one. Covariate shift uses the largest ω, Ω and σ² over clients.
pub fn constants_federated_with_kurtosis(
    problem: &ProblemSpec,
    specs: &[CompressorSpec],
    mode: HeterogeneityMode,
    kurtosis: f64,
) -> Result<NoiseConstants> {
    let n = problem.n_clients();
    let nf = n as f64;
    let d = problem.dim();
    let spec_of = |i: usize| -> Result<CompressorSpec> {
        match specs.len() {
            1 => Ok(specs[0]),
            m if m == n => Ok(specs[i]),
            m => Err(Error::Config(format!("{m} compressors for {n} clients"))),
        }
    };
    let client_specs: Vec<CompressorSpec> = (0..n).map(spec_of).collect::<Result<_>>()?;
    for s in &client_specs {
        s.validate(d)?;
    }
    let profiles: Vec<_> = client_specs.iter().map(|s| profile(s, d)).collect();
    let omega = profiles.iter().map(|p| p.omega).fold(0.0, f64::max);
    let omega_holder = profiles.iter().map(|p| p.omega_holder).fold(0.0, f64::max);
    let all_linear = profiles.iter().all(|p| p.is_linear);
    let sigma2 = problem.clients.iter().map(|c| c.noise_var).fold(0.0, f64::max);
    let mut warnings = Vec::new();

    match mode {
        HeterogeneityMode::CovariateShift => {
            if !problem.shares_w_star(1e-8) {
                return Err(Error::Config(
                    "covariate shift requires a common optimum across clients".into(),
                ));
            }
            let r2_bar = problem.mean_trace();
            let r2_max = problem.max_trace();
            // C_ania = (1/N²) Σ σᵢ² 𝔈(Cᵢ, Hᵢ), traced against H̄⁻¹.
            let mut c_ania = Matrix::zeros(d, d);
            for (c, s) in problem.clients.iter().zip(&client_specs) {
                c_ania += analytical_covariance(s, &c.covariance)?.matrix * c.noise_var;
            }
            c_ania /= nf * nf;
            let tr = trace_against(&c_ania, &problem.hessian, &mut warnings);
            let (sha_add, sha_mult) = if all_linear {
                let mut max_sha = 0.0_f64;
                let mut max_r2_sha = 0.0_f64;
                for (c, s) in problem.clients.iter().zip(&client_specs) {
                    let sha = sha_or_inf(s, &c.covariance)?.expect("linear");
                    max_sha = max_sha.max(sha);
                    max_r2_sha = max_r2_sha.max(c.covariance.trace() * sha);
                }
                (Some(sigma2 * max_sha / nf), Some(max_r2_sha / nf))
            } else {
                (None, None)
            };
            Ok(NoiseConstants {
                a: (omega + 1.0) * r2_bar * sigma2 / nf,
                m1: omega_holder * sigma2.sqrt() * r2_max / nf,
                m2: (omega + 1.0) * r2_max / nf,
                sha_add,
                sha_mult,
                tr_ania_hinv: tr,
                omega,
                omega_holder,
                warnings,
            })
        }
        HeterogeneityMode::ConceptShift => {
            if !problem.shares_covariance(1e-8) {
                return Err(Error::Config(
                    "concept shift requires a common covariance across clients".into(),
                ));
            }
            let h = &problem.clients[0].covariance;
            let r2 = h.trace();
            let spread = optimum_spread(problem);
            let het = kurtosis * (h.matrix() * &spread).trace() + sigma2;
            let mut mean_tr = 0.0;
            for s in &client_specs {
                mean_tr += compressed_trace(s, h, &mut warnings)?;
            }
            mean_tr /= nf;
            let sha = if all_linear {
                let mut m = 0.0_f64;
                for s in &client_specs {
                    m = m.max(sha_or_inf(s, h)?.expect("linear"));
                }
                Some(m)
            } else {
                None
            };
            Ok(NoiseConstants {
                a: r2 * (omega + 1.0) / nf * het,
                m1: omega_holder * r2 * sigma2.sqrt() / nf,
                m2: (omega + 1.0) * r2 / nf,
                sha_add: sha.map(|s| sigma2 * s / nf),
                sha_mult: sha.map(|s| r2 * s / nf),
                tr_ania_hinv: het / nf * mean_tr,
                omega,
                omega_holder,
                warnings,
            })
        }
    }
}

/// `Cov(W*) = (1/N) Σ (w* − w*ᵢ)(w* − w*ᵢ)ᵀ`.
pub fn optimum_spread(problem: &ProblemSpec) -> Matrix {
    let d = problem.dim();
    let mut acc = Matrix::zeros(d, d);
    for c in &problem.clients {
        let diff = &problem.w_star_global - &c.w_star_local;
        acc.ger(1.0, &diff, &diff, 1.0);
    }
    acc / problem.n_clients() as f64
}

fn trace_against(c: &Matrix, h: &CovarianceModel, warnings: &mut Vec<String>) -> f64 {
    let cov = crate::covariance::CompCovResult {
        matrix: c.clone(),
        is_upper_bound: false,
    };
    match trace_diagnostic(&cov, h) {
        Ok(t) => t,
        Err(_) => {
            warnings.push(format!(
                "H is singular (mu = {:e}); terms divided by mu are infinite",
                h.mu()
            ));
            f64::INFINITY
        }
    }
}

fn check_horizon(k: usize, eta0: &Vector, problem: &ProblemSpec) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if eta0.len() != problem.dim() {
        return Err(Error::InvalidDimension(format!(
            "eta0 has length {}, problem is {}-dimensional",
            eta0.len(),
            problem.dim()
        )));
    }
    Ok(())
}

/// Largest γ allowed by `γ(R_F² + 2ℳ₂) ≤ ½`.
pub fn max_gamma_nonlinear(c: &NoiseConstants, problem: &ProblemSpec) -> f64 {
    0.5 / (problem.hessian.trace() + 2.0 * c.m2)
}

/// Largest γ allowed by `γ(R_F² + ℳ₂) ≤ 1` and `4 Sha_mult γ ≤ 1`.
pub fn max_gamma_linear(c: &NoiseConstants, problem: &ProblemSpec) -> Option<f64> {
    let sha_mult = c.sha_mult?;
    Some((1.0 / (problem.hessian.trace() + c.m2)).min(1.0 / (4.0 * sha_mult)))
}

/// `(1/2K)(min(‖H^{-1/2}η₀‖/(γ√K), ‖η₀‖/√γ) + √Tr(C_ania H⁻¹)
///   + (10𝒜γ)^{1/4}√(ℳ₁/μ) + (30𝒜γ)^{1/2}√(ℳ₂/μ))²`.
pub fn bound_theorem_nonlinear(
    c: &NoiseConstants,
    problem: &ProblemSpec,
    gamma: f64,
    k: usize,
    eta0: &Vector,
) -> Result<f64> {
    check_horizon(k, eta0, problem)?;
    let h = &problem.hessian;
    h.ensure_invertible()?;
    let lhs = gamma * (h.trace() + 2.0 * c.m2);
    if !(gamma > 0.0) || lhs > 0.5 * (1.0 + PRECONDITION_SLACK) {
        return Err(Error::Precondition(format!(
            "gamma (R_F^2 + 2 M2) = {lhs:.6} exceeds 1/2"
        )));
    }
    let kf = k as f64;
    let mu = h.mu();
    let init = (h.inverse_quadratic(eta0)?.sqrt() / (gamma * kf.sqrt())).min(eta0.norm() / gamma.sqrt());
    let sum = init
        + c.tr_ania_hinv.sqrt()
        + (10.0 * c.a * gamma).powf(0.25) * (c.m1 / mu).sqrt()
        + (30.0 * c.a * gamma).sqrt() * (c.m2 / mu).sqrt();
    Ok(sum * sum / (2.0 * kf))
}

/// `(1/2K)(‖η₀‖/√γ + √Tr(C_ania H⁻¹) + 2√(γ d Sha_add Sha_mult))²`.
pub fn bound_theorem_linear(
    c: &NoiseConstants,
    problem: &ProblemSpec,
    gamma: f64,
    k: usize,
    eta0: &Vector,
) -> Result<f64> {
    check_horizon(k, eta0, problem)?;
    let (Some(sha_add), Some(sha_mult)) = (c.sha_add, c.sha_mult) else {
        return Err(Error::UnsupportedFormula(
            "the linear-noise bound needs a linear compressor".into(),
        ));
    };
    let h = &problem.hessian;
    let first = gamma * (h.trace() + c.m2);
    let second = 4.0 * sha_mult * gamma;
    if !(gamma > 0.0) || first > 1.0 + PRECONDITION_SLACK {
        return Err(Error::Precondition(format!(
            "gamma (R_F^2 + M2) = {first:.6} exceeds 1"
        )));
    }
    if second > 1.0 + PRECONDITION_SLACK {
        return Err(Error::Precondition(format!(
            "4 Sha_mult gamma = {second:.6} exceeds 1"
        )));
    }
    let kf = k as f64;
    let d = problem.dim() as f64;
    let sum = eta0.norm() / gamma.sqrt()
        + c.tr_ania_hinv.sqrt()
        + 2.0 * (gamma * d * sha_add * sha_mult).sqrt();
    Ok(sum * sum / (2.0 * kf))
}

/// `(60/K)(Tr(C_ania H⁻¹) + ‖H^{-1/2}η₀‖²/K^{1−2α} + ℳ₁√𝒜/(μK^{α/2}) + ℳ₂𝒜/(μK^α))`,
/// the bound for `γ = K^{−α}`.
pub fn bound_corollary_horizon(
    c: &NoiseConstants,
    problem: &ProblemSpec,
    k: usize,
    alpha_exp: f64,
    eta0: &Vector,
) -> Result<f64> {
    check_horizon(k, eta0, problem)?;
    if !(alpha_exp > 0.0 && alpha_exp < 0.5) {
        return Err(Error::Config(format!(
            "horizon exponent must lie in (0, 1/2), got {alpha_exp}"
        )));
    }
    let h = &problem.hessian;
    h.ensure_invertible()?;
    let kf = k as f64;
    let mu = h.mu();
    let terms = c.tr_ania_hinv
        + h.inverse_quadratic(eta0)? / kf.powf(1.0 - 2.0 * alpha_exp)
        + c.m1 * c.a.sqrt() / (mu * kf.powf(alpha_exp / 2.0))
        + c.m2 * c.a / (mu * kf.powf(alpha_exp));
    Ok(60.0 / kf * terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_synthetic_covariance, ClientSpec, Rotation};

    fn single(d: usize, decay: f64, rot: Rotation, sigma2: f64) -> ProblemSpec {
        let h = make_synthetic_covariance(d, decay, rot, 1).unwrap();
        ProblemSpec::centralized(h, Vector::from_element(d, 1.0), sigma2).unwrap()
    }

    #[test]
    fn centralized_examples() {
        let p = single(8, 1.0, Rotation::RandomOrthogonal, 1.0);
        let c = constants_centralized(&p, &CompressorSpec::Identity).unwrap();
        assert!((c.tr_ania_hinv - 8.0).abs() < 1e-9);
        assert_eq!(c.m1, 0.0);

        let p = single(100, 4.0, Rotation::Identity, 1.0);
        let r2 = p.hessian.trace();
        let c = constants_centralized(&p, &CompressorSpec::quantize()).unwrap();
        assert!((c.m1 - 120.0 * r2).abs() < 1e-12);
        assert!(c.sha_add.is_none());

        let p = single(5, 1.0, Rotation::RandomOrthogonal, 0.7);
        let r2 = p.hessian.trace();
        let c = constants_centralized(&p, &CompressorSpec::PartialParticipation { p: 0.5 }).unwrap();
        assert!((c.sha_add.unwrap() - 2.0 * 0.7).abs() < 1e-12);
        assert!((c.sha_mult.unwrap() - 2.0 * r2).abs() < 1e-12);
        assert!((c.a - 2.0 * r2 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn singular_hessian_is_flagged_not_fatal() {
        let h = CovarianceModel::diagonal(&[1.0, 0.0]).unwrap();
        let p = ProblemSpec::centralized(h, Vector::zeros(2), 1.0).unwrap();
        let c = constants_centralized(&p, &CompressorSpec::quantize()).unwrap();
        assert!(c.tr_ania_hinv.is_infinite());
        assert!(!c.warnings.is_empty());
        let err = bound_theorem_nonlinear(&c, &p, 1e-3, 10, &Vector::zeros(2));
        assert!(matches!(err, Err(Error::SingularHessian(_))));
    }

    #[test]
    fn federated_single_client_matches_centralized() {
        let p = single(6, 2.0, Rotation::RandomOrthogonal, 0.5);
        for spec in [
            CompressorSpec::Identity,
            CompressorSpec::quantize(),
            CompressorSpec::Sparsify { p: 0.3 },
            CompressorSpec::RandH { h: 2 },
            CompressorSpec::SketchGaussian { h: 3 },
        ] {
            let cen = constants_centralized(&p, &spec).unwrap();
            for mode in [HeterogeneityMode::CovariateShift, HeterogeneityMode::ConceptShift] {
                let fed = constants_federated(&p, &[spec], mode).unwrap();
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
                assert!(close(cen.a, fed.a), "{spec:?} {mode:?} A");
                assert!(close(cen.m1, fed.m1));
                assert!(close(cen.m2, fed.m2));
                assert!(close(cen.tr_ania_hinv, fed.tr_ania_hinv));
                assert_eq!(cen.sha_add.is_some(), fed.sha_add.is_some());
                if let (Some(x), Some(y)) = (cen.sha_mult, fed.sha_mult) {
                    assert!(close(x, y));
                    assert!(close(cen.sha_add.unwrap(), fed.sha_add.unwrap()));
                }
            }
        }
    }

    #[test]
    fn concept_shift_hand_substitution() {
        let h = CovarianceModel::identity(2);
        let e1 = Vector::from_vec(vec![1.0, 0.0]);
        let p = ProblemSpec::new(vec![
            ClientSpec::new(h.clone(), e1.clone(), 1.0).unwrap(),
            ClientSpec::new(h, -e1, 1.0).unwrap(),
        ])
        .unwrap();
        let c = constants_federated(&p, &[CompressorSpec::Identity], HeterogeneityMode::ConceptShift).unwrap();
        let spread = optimum_spread(&p);
        assert!((spread.trace() - 1.0).abs() < 1e-15);
        // R² = 2, (3·1 + 1)/2 · R² = 2R² = 4.
        assert!((c.a - 4.0).abs() < 1e-12);
    }

    #[test]
    fn concept_shift_without_spread() {
        let h = make_synthetic_covariance(4, 1.0, Rotation::RandomOrthogonal, 2).unwrap();
        let w = Vector::from_element(4, 2.0);
        let clients: Vec<_> = (0..5).map(|_| ClientSpec::new(h.clone(), w.clone(), 1.5).unwrap()).collect();
        let p = ProblemSpec::new(clients).unwrap();
        let spec = CompressorSpec::Sparsify { p: 0.25 };
        let c = constants_federated(&p, &[spec], HeterogeneityMode::ConceptShift).unwrap();
        assert!((c.a - 4.0 * h.trace() * 1.5 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let h1 = make_synthetic_covariance(3, 1.0, Rotation::RandomOrthogonal, 1).unwrap();
        let h2 = make_synthetic_covariance(3, 2.0, Rotation::RandomOrthogonal, 2).unwrap();
        let p = ProblemSpec::new(vec![
            ClientSpec::new(h1, Vector::zeros(3), 1.0).unwrap(),
            ClientSpec::new(h2, Vector::from_element(3, 1.0), 1.0).unwrap(),
        ])
        .unwrap();
        for mode in [HeterogeneityMode::CovariateShift, HeterogeneityMode::ConceptShift] {
            assert!(matches!(
                constants_federated(&p, &[CompressorSpec::Identity], mode),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn nonlinear_bound_reduces_to_trace_term() {
        let p = single(5, 1.0, Rotation::RandomOrthogonal, 1.0);
        let mut c = constants_centralized(&p, &CompressorSpec::quantize()).unwrap();
        c.a = 0.0;
        let gamma = max_gamma_nonlinear(&c, &p);
        let b = bound_theorem_nonlinear(&c, &p, gamma, 1000, &Vector::zeros(5)).unwrap();
        assert!((b - c.tr_ania_hinv / 2000.0).abs() < 1e-12 * b);
    }

    #[test]
    fn nonlinear_bound_scales_with_horizon() {
        let p = single(20, 1.0, Rotation::RandomOrthogonal, 1.0);
        let c = constants_centralized(&p, &CompressorSpec::quantize()).unwrap();
        let gamma = max_gamma_nonlinear(&c, &p);
        let z = Vector::zeros(20);
        let b1 = bound_theorem_nonlinear(&c, &p, gamma, 10_000, &z).unwrap();
        let b2 = bound_theorem_nonlinear(&c, &p, gamma, 100_000, &z).unwrap();
        let ratio = b1 / b2;
        assert!((9.0..=11.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn nonlinear_precondition_enforced() {
        let p = single(5, 1.0, Rotation::RandomOrthogonal, 1.0);
        let c = constants_centralized(&p, &CompressorSpec::quantize()).unwrap();
        let gamma = max_gamma_nonlinear(&c, &p) * 1.01;
        assert!(matches!(
            bound_theorem_nonlinear(&c, &p, gamma, 10, &Vector::zeros(5)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn initial_condition_uses_smaller_form() {
        let p = single(3, 1.0, Rotation::Identity, 1.0);
        let mut c = constants_centralized(&p, &CompressorSpec::Identity).unwrap();
        c.tr_ania_hinv = 0.0;
        c.a = 0.0;
        let gamma = 0.05;
        let eta = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        for k in [1usize, 10, 1000] {
            let got = bound_theorem_nonlinear(&c, &p, gamma, k, &eta).unwrap();
            let kf = k as f64;
            let a = 1.0 / (gamma * kf.sqrt());
            let b = 1.0 / gamma.sqrt();
            let oracle = a.min(b).powi(2) / (2.0 * kf);
            assert!((got - oracle).abs() < 1e-12 * oracle);
        }
    }

    #[test]
    fn linear_bound_identity_recovers_lms() {
        let p = single(10, 1.0, Rotation::RandomOrthogonal, 1.0);
        let c = constants_centralized(&p, &CompressorSpec::Identity).unwrap();
        let gamma = max_gamma_linear(&c, &p).unwrap();
        let k = 1_000_000_000;
        let b = bound_theorem_linear(&c, &p, gamma, k, &Vector::zeros(10)).unwrap();
        let leading = 10.0 / (2.0 * k as f64);
        assert!(b >= leading);
        let small = bound_theorem_linear(&c, &p, gamma * 1e-10, k, &Vector::zeros(10)).unwrap();
        assert!((small - leading).abs() < 1e-3 * leading);
    }

    #[test]
    fn linear_bound_rejects_quantization_and_large_steps() {
        let p = single(5, 1.0, Rotation::RandomOrthogonal, 1.0);
        let q = constants_centralized(&p, &CompressorSpec::quantize()).unwrap();
        assert!(bound_theorem_linear(&q, &p, 1e-4, 10, &Vector::zeros(5)).is_err());
        let s = constants_centralized(&p, &CompressorSpec::Sparsify { p: 0.5 }).unwrap();
        let g = max_gamma_linear(&s, &p).unwrap();
        assert!(bound_theorem_linear(&s, &p, g, 10, &Vector::zeros(5)).is_ok());
        assert!(matches!(
            bound_theorem_linear(&s, &p, g * 1.01, 10, &Vector::zeros(5)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pp_bound_below_sparsify_on_constant_diagonal() {
        // Unit diagonal, correlated coordinates.
        let d = 6;
        let rho: f64 = 0.3;
        let m = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho.powi((i as i32 - j as i32).abs()) });
        let h = CovarianceModel::new(m).unwrap();
        let p = ProblemSpec::centralized(h, Vector::from_element(d, 1.0), 1.0).unwrap();
        let pp = constants_centralized(&p, &CompressorSpec::PartialParticipation { p: 0.5 }).unwrap();
        let sp = constants_centralized(&p, &CompressorSpec::Sparsify { p: 0.5 }).unwrap();
        let gamma = max_gamma_linear(&pp, &p).unwrap().min(max_gamma_linear(&sp, &p).unwrap());
        let z = Vector::zeros(d);
        let a = bound_theorem_linear(&pp, &p, gamma, 10_000, &z).unwrap();
        let b = bound_theorem_linear(&sp, &p, gamma, 10_000, &z).unwrap();
        assert!(pp.tr_ania_hinv <= sp.tr_ania_hinv);
        assert!(a <= b, "{a} vs {b}");
    }

    #[test]
    fn corollary_examples() {
        let p = single(5, 1.0, Rotation::RandomOrthogonal, 1.0);
        let mut c = constants_centralized(&p, &CompressorSpec::quantize()).unwrap();
        let z = Vector::zeros(5);
        let tr = c.tr_ania_hinv;
        c.a = 0.0;
        let b = bound_corollary_horizon(&c, &p, 1000, 0.3, &z).unwrap();
        assert!((b - 60.0 * tr / 1000.0).abs() < 1e-12 * b);
        assert!(bound_corollary_horizon(&c, &p, 1000, 0.5, &z).is_err());
        assert!(bound_corollary_horizon(&c, &p, 1000, 0.0, &z).is_err());
    }

    #[test]
    fn corollary_exponent_balance() {
        // With M1√A/μ and M2·A/μ comparable and ‖H^{-1/2}η₀‖² of the same
        // order, the largest of K^{-(1-2α)}, K^{-α/2}, K^{-α} is smallest at α = 2/5.
        let p = single(3, 0.0, Rotation::Identity, 1.0);
        let c = NoiseConstants {
            a: 1.0,
            m1: 1.0,
            m2: 1.0,
            sha_add: None,
            sha_mult: None,
            tr_ania_hinv: 0.0,
            omega: 0.0,
            omega_holder: 0.0,
            warnings: vec![],
        };
        let eta = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        let k = 1_000_000_000_000usize;
        let at = |a: f64| bound_corollary_horizon(&c, &p, k, a, &eta).unwrap();
        let best = at(0.4);
        assert!(best <= at(0.1));
        assert!(best <= at(0.49));
    }

    #[test]
    fn bounds_nonincreasing_in_horizon() {
        let p = single(8, 1.0, Rotation::RandomOrthogonal, 1.0);
        let z = Vector::zeros(8);
        let c = constants_centralized(&p, &CompressorSpec::Sparsify { p: 0.2 }).unwrap();
        let gl = max_gamma_linear(&c, &p).unwrap();
        let gn = max_gamma_nonlinear(&c, &p);
        let mut prev = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for k in [10usize, 100, 1000, 10_000, 100_000] {
            let cur = (
                bound_theorem_linear(&c, &p, gl, k, &z).unwrap(),
                bound_theorem_nonlinear(&c, &p, gn, k, &z).unwrap(),
                bound_corollary_horizon(&c, &p, k, 0.4, &z).unwrap(),
            );
            assert!(cur.0 >= 0.0 && cur.0 <= prev.0);
            assert!(cur.1 >= 0.0 && cur.1 <= prev.1);
            assert!(cur.2 >= 0.0 && cur.2 <= prev.2);
            prev = cur;
        }
    }
}
