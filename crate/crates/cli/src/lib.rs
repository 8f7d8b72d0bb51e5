//! Experiment runner behind the `clsa` binary.
//!
//! One JSON document describes a problem and a list of run variants; the
//! three commands turn it into trajectory, covariance and bound tables.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use compressed_lsa::bounds::{
    bound_corollary_horizon, bound_theorem_linear, bound_theorem_nonlinear, constants_centralized,
    constants_federated, max_gamma_linear, max_gamma_nonlinear, HeterogeneityMode, NoiseConstants,
};
use compressed_lsa::compressors::{calibrate_for_omega, profile, CompressorKind, CompressorSpec};
use compressed_lsa::covariance::{analytical_covariance, empirical_covariance_mc};
use compressed_lsa::data::{
    empirical_problem, fit_apply_preprocess, load_csv, split_clients, Dataset, PreprocessKind,
    SplitStrategy,
};
use compressed_lsa::linalg::{self, Matrix, Vector};
use compressed_lsa::model::{make_synthetic_covariance, ClientSpec, ProblemSpec, Rotation};
use compressed_lsa::optimizer::{
    default_step_size, run, run_on_datasets, Algorithm, GradientMode, RunConfig, StepSizeRule,
    Trajectory,
};
use compressed_lsa::rng::{stream, Role, StreamKey};
use compressed_lsa::Error;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

pub const SUMMARY_HEADER: [&str; 6] = [
    "variant",
    "iter",
    "n_seeds",
    "mean_log10_loss_avg",
    "std_log10_loss_avg",
    "mean_log10_loss_last",
];
pub const COVARIANCE_HEADER: [&str; 8] = [
    "compressor",
    "omega",
    "realized_omega",
    "spec",
    "analytical_trace",
    "empirical_trace",
    "frobenius_gap",
    "is_upper_bound",
];
pub const EIGENVALUES_HEADER: [&str; 5] = ["compressor", "omega", "source", "index", "eigenvalue"];
pub const THEORY_HEADER: [&str; 17] = [
    "variant",
    "compressor",
    "k",
    "gamma",
    "gamma_max_nonlinear",
    "gamma_max_linear",
    "bound_nonlinear",
    "bound_linear",
    "bound_corollary",
    "tr_ania_hinv",
    "a",
    "m1",
    "m2",
    "sha_add",
    "sha_mult",
    "omega",
    "flag",
];

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::Io(_) | Error::Csv(_) => EXIT_FAILURE,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    Trajectories,
    Covariances,
    TracesVsOmega,
    TheoryBounds,
}

fn all_emits() -> BTreeSet<Emit> {
    [Emit::Trajectories, Emit::Covariances, Emit::TracesVsOmega, Emit::TheoryBounds].into()
}

fn one() -> usize {
    1
}

fn default_decay() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

fn default_label() -> String {
    "label".into()
}

/// How the least-squares problem is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Eigenvalues `1/i^decay`, optimum `w* = 1`.
    Synthetic {
        dim: usize,
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default)]
        rotation: Option<Rotation>,
        #[serde(default = "default_noise")]
        noise_var: f64,
        #[serde(default = "one")]
        clients: usize,
        /// Per-client decay exponents; each client also gets its own rotation.
        #[serde(default)]
        client_decays: Option<Vec<f64>>,
        /// Client optima drawn as `w* + scale · N(0, I)`.
        #[serde(default)]
        optimum_spread: Option<f64>,
        #[serde(default)]
        seed: u64,
    },
    Inline {
        spec: ProblemSpec,
    },
    Dataset {
        path: PathBuf,
        #[serde(default = "default_label")]
        label: String,
        #[serde(default)]
        preprocess: PreprocessKind,
        #[serde(default = "one")]
        clients: usize,
        #[serde(default)]
        split: Option<SplitStrategy>,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepConfig {
    /// `1/(2(ω+1)R̄²)`.
    Default,
    Constant { gamma: f64 },
    HorizonPower { alpha_exp: f64 },
    /// Largest γ accepted by the linear-noise bound (linear compressors) or
    /// the non-linear one (quantization).
    MaxAdmissible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub kind: CompressorKind,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub compressor: Option<CompressorSpec>,
    #[serde(default)]
    pub calibrate: Option<Calibration>,
    #[serde(default = "default_step")]
    pub step: StepConfig,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub memory_rate: Option<f64>,
    #[serde(default)]
    pub gradient_mode: GradientMode,
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
}

fn default_step() -> StepConfig {
    StepConfig::Default
}

fn default_omega_grid() -> Vec<f64> {
    vec![1.0, 3.0, 9.0, 19.0]
}

fn default_kinds() -> Vec<CompressorKind> {
    CompressorKind::ALL.to_vec()
}

fn default_cov_samples() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    #[serde(default = "default_omega_grid")]
    pub omega_grid: Vec<f64>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<CompressorKind>,
    /// Monte-Carlo samples per row; 0 skips the empirical columns.
    #[serde(default = "default_cov_samples")]
    pub n_samples: usize,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            omega_grid: default_omega_grid(),
            kinds: default_kinds(),
            n_samples: default_cov_samples(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// Horizons to evaluate; defaults to powers of ten up to the horizon.
    #[serde(default)]
    pub k_grid: Option<Vec<usize>>,
    /// Federated constants; inferred from the problem when absent.
    #[serde(default)]
    pub mode: Option<HeterogeneityMode>,
}

fn default_horizon() -> usize {
    100_000
}

fn default_seeds() -> usize {
    5
}

fn default_ppd() -> usize {
    50
}

fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub runs: Vec<VariantConfig>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ppd")]
    pub points_per_decade: usize,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
    #[serde(default = "all_emits")]
    pub emit: BTreeSet<Emit>,
    #[serde(default)]
    pub covariance: CovarianceConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<usize>,
    pub horizon: Option<usize>,
}

impl ExperimentConfig {
    /// Reads a config; relative dataset paths resolve against its directory.
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if let ProblemConfig::Dataset { path: data, .. } = &mut cfg.problem {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(out) = &overrides.out {
            self.outputs = out.clone();
        }
        if let Some(s) = overrides.seeds {
            self.seeds = s;
        }
        if let Some(k) = overrides.horizon {
            self.horizon = k;
        }
    }

    pub fn validate_runs(&self) -> CliResult<()> {
        if self.runs.is_empty() {
            return Err(CliError::config("config has no runs"));
        }
        if self.horizon == 0 || self.seeds == 0 {
            return Err(CliError::config("horizon and seeds must be >= 1"));
        }
        let mut names = BTreeSet::new();
        for v in &self.runs {
            let ok = !v.name.is_empty()
                && v.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
            if !ok || v.name.starts_with('.') {
                return Err(CliError::config(format!(
                    "run name {:?} must be non-empty [A-Za-z0-9_.-]",
                    v.name
                )));
            }
            if !names.insert(&v.name) {
                return Err(CliError::config(format!("duplicate run name {:?}", v.name)));
            }
        }
        Ok(())
    }
}

/// A problem plus, for dataset problems, the per-client rows to sample from.
pub struct BuiltProblem {
    pub problem: ProblemSpec,
    pub datasets: Option<Vec<Dataset>>,
    pub warnings: Vec<String>,
}

pub fn build_problem(cfg: &ProblemConfig) -> CliResult<BuiltProblem> {
    let mut warnings = Vec::new();
    let (problem, datasets) = match cfg {
        ProblemConfig::Synthetic {
            dim,
            decay,
            rotation,
            noise_var,
            clients,
            client_decays,
            optimum_spread,
            seed,
        } => {
            let n = match client_decays {
                Some(d) if *clients != 1 && d.len() != *clients => {
                    return Err(CliError::config(format!(
                        "{} client decays for {clients} clients",
                        d.len()
                    )))
                }
                Some(d) => d.len(),
                None => *clients,
            };
            if n == 0 {
                return Err(CliError::config("clients must be >= 1"));
            }
            let rotation = rotation.unwrap_or(Rotation::Identity);
            let shared = make_synthetic_covariance(*dim, *decay, rotation, *seed)?;
            let w_star = Vector::from_element(*dim, 1.0);
            let mut rng = stream(*seed, StreamKey::new(0, 1, Role::Problem));
            let specs = (0..n)
                .map(|i| {
                    let cov = match client_decays {
                        Some(d) => make_synthetic_covariance(
                            *dim,
                            d[i],
                            Rotation::RandomOrthogonal,
                            seed.wrapping_add(i as u64 + 1),
                        )?,
                        None => shared.clone(),
                    };
                    let w = match optimum_spread {
                        Some(s) => &w_star + linalg::gaussian_vector(*dim, &mut rng) * *s,
                        None => w_star.clone(),
                    };
                    ClientSpec::new(cov, w, *noise_var)
                })
                .collect::<compressed_lsa::Result<Vec<_>>>()?;
            (ProblemSpec::new(specs)?, None)
        }
        ProblemConfig::Inline { spec } => (spec.clone(), None),
        ProblemConfig::Dataset {
            path,
            label,
            preprocess,
            clients,
            split,
            seed,
        } => {
            let (raw, report) = load_csv(path, label)?;
            if report.dropped_rows > 0 {
                warnings.push(format!(
                    "dropped {} rows with missing or non-finite values",
                    report.dropped_rows
                ));
            }
            let (ds, _) = fit_apply_preprocess(&raw, *preprocess)?;
            let parts = if *clients <= 1 {
                vec![ds]
            } else {
                split_clients(&ds, *clients, split.unwrap_or(SplitStrategy::Iid), *seed)?
            };
            let emp = empirical_problem(&parts)?;
            if emp.is_rank_deficient() {
                warnings.push(format!(
                    "feature second moment is rank deficient (rank {}); using the minimum-norm optimum",
                    emp.rank
                ));
            }
            (emp.problem, Some(parts))
        }
    };
    Ok(BuiltProblem {
        problem,
        datasets,
        warnings,
    })
}

/// A variant with its compressor and step rule resolved against the problem.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedVariant {
    pub name: String,
    pub compressor: CompressorSpec,
    pub omega: f64,
    pub step_rule: StepSizeRule,
    pub gamma: f64,
    #[serde(skip)]
    pub run: RunConfig,
}

pub fn resolve_variant(
    v: &VariantConfig,
    problem: &ProblemSpec,
    exp: &ExperimentConfig,
) -> CliResult<ResolvedVariant> {
    let d = problem.dim();
    let compressor = match (v.algorithm, v.compressor, v.calibrate) {
        (Algorithm::Lms, None, None) => CompressorSpec::Identity,
        (Algorithm::Lms, _, _) => {
            return Err(CliError::config(format!(
                "run {:?}: lms takes no compressor",
                v.name
            )))
        }
        (_, Some(_), Some(_)) => {
            return Err(CliError::config(format!(
                "run {:?}: give either compressor or calibrate",
                v.name
            )))
        }
        (_, Some(spec), None) => spec,
        (_, None, Some(c)) => calibrate_for_omega(c.kind, d, c.omega)?,
        (_, None, None) => {
            return Err(CliError::config(format!("run {:?}: no compressor", v.name)))
        }
    };
    compressor.validate(d)?;
    let omega = profile(&compressor, d).omega;
    let step_rule = match v.step {
        StepConfig::Default => StepSizeRule::Constant {
            gamma: default_step_size(problem, omega)?.gamma,
        },
        StepConfig::Constant { gamma } => StepSizeRule::Constant { gamma },
        StepConfig::HorizonPower { alpha_exp } => StepSizeRule::HorizonPower { alpha_exp },
        StepConfig::MaxAdmissible => {
            let c = noise_constants(problem, &compressor, &exp.theory)?;
            StepSizeRule::Constant {
                gamma: admissible_gamma(&c, problem, &compressor),
            }
        }
    };
    let gamma = step_rule.gamma(exp.horizon)?;
    let compressors = if v.algorithm == Algorithm::Lms {
        vec![]
    } else {
        vec![compressor]
    };
    let mut run = RunConfig::new(v.algorithm, compressors, step_rule, exp.horizon)
        .with_seed(exp.seed)
        .with_repeats(exp.seeds)
        .with_batch(v.batch_size)
        .with_gradient_mode(v.gradient_mode);
    run.memory_rate = v.memory_rate;
    run.points_per_decade = exp.points_per_decade;
    run.w0 = v.w0.clone();
    run.validate(problem)?;
    Ok(ResolvedVariant {
        name: v.name.clone(),
        compressor,
        omega,
        step_rule,
        gamma,
        run,
    })
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn write_trajectory(path: &Path, t: &Trajectory) -> CliResult<()> {
    let file = fs::File::create(path)?;
    t.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

fn log10_floor(v: f64) -> f64 {
    v.max(f64::MIN_POSITIVE).log10()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Serialize)]
struct Meta<'a> {
    version: &'static str,
    problem_dim: usize,
    n_clients: usize,
    mean_trace: f64,
    mu: f64,
    variants: &'a [ResolvedVariant],
    warnings: &'a [String],
    config: &'a ExperimentConfig,
}

/// Runs every variant and writes `<out>/<variant>/seed<k>.csv`, `summary.csv`
/// and `meta.json`. Losses are floored at the smallest positive double before
/// taking logarithms.
pub fn cmd_run(exp: &ExperimentConfig) -> CliResult<()> {
    exp.validate_runs()?;
    let built = build_problem(&exp.problem)?;
    let mut warnings = built.warnings.clone();
    let variants = exp
        .runs
        .iter()
        .map(|v| resolve_variant(v, &built.problem, exp))
        .collect::<CliResult<Vec<_>>>()?;
    for v in &variants {
        if let Ok(step) = default_step_size(&built.problem, v.omega) {
            if matches!(v.step_rule, StepSizeRule::Constant { .. })
                && v.gamma > step.gamma * (1.0 + 1e-12)
                && !step.satisfies_nonlinear_precondition
            {
                warnings.push(format!("{}: step size exceeds the default", v.name));
            }
        }
    }
    for w in &warnings {
        warn(w);
    }
    fs::create_dir_all(&exp.outputs)?;
    let emit_traj = exp.emit.contains(&Emit::Trajectories);
    let mut summary = csv::Writer::from_path(exp.outputs.join("summary.csv"))?;
    summary.write_record(SUMMARY_HEADER)?;
    for v in &variants {
        let trajs = match &built.datasets {
            Some(ds) => run_on_datasets(&built.problem, &v.run, ds)?,
            None => run(&built.problem, &v.run)?,
        };
        if emit_traj {
            let dir = exp.outputs.join(&v.name);
            fs::create_dir_all(&dir)?;
            for t in &trajs {
                write_trajectory(&dir.join(format!("seed{}.csv", t.repeat)), t)?;
            }
        }
        for (j, k) in trajs[0].iters.iter().enumerate() {
            let avg: Vec<f64> = trajs.iter().map(|t| log10_floor(t.loss_avg[j])).collect();
            let last: Vec<f64> = trajs.iter().map(|t| log10_floor(t.loss_last[j])).collect();
            let (m, s) = mean_std(&avg);
            let (ml, _) = mean_std(&last);
            summary.write_record([
                v.name.clone(),
                k.to_string(),
                trajs.len().to_string(),
                m.to_string(),
                s.to_string(),
                ml.to_string(),
            ])?;
        }
    }
    summary.flush()?;
    let meta = Meta {
        version: env!("CARGO_PKG_VERSION"),
        problem_dim: built.problem.dim(),
        n_clients: built.problem.n_clients(),
        mean_trace: built.problem.mean_trace(),
        mu: built.problem.hessian.mu(),
        variants: &variants,
        warnings: &warnings,
        config: exp,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(Error::from)?;
    fs::write(exp.outputs.join("meta.json"), json + "\n")?;
    if exp.emit.contains(&Emit::TheoryBounds) {
        write_theory(exp, &built, &variants)?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `covariance.csv` (trace of `𝔈(C, H)H⁻¹` against ω) and
/// `eigenvalues.csv` for the problem's Hessian.
pub fn cmd_covariance(exp: &ExperimentConfig) -> CliResult<()> {
    let built = build_problem(&exp.problem)?;
    for w in &built.warnings {
        warn(w);
    }
    let h = &built.problem.hessian;
    let d = h.dim();
    let h_inv = h.inverse()?;
    let cfg = &exp.covariance;
    if cfg.omega_grid.is_empty() || cfg.kinds.is_empty() {
        return Err(CliError::config("covariance needs a non-empty omega_grid and kinds"));
    }
    fs::create_dir_all(&exp.outputs)?;
    let mut traces = exp
        .emit
        .contains(&Emit::TracesVsOmega)
        .then(|| csv::Writer::from_path(exp.outputs.join("covariance.csv")))
        .transpose()?;
    let mut eigs = exp
        .emit
        .contains(&Emit::Covariances)
        .then(|| csv::Writer::from_path(exp.outputs.join("eigenvalues.csv")))
        .transpose()?;
    if let Some(w) = traces.as_mut() {
        w.write_record(COVARIANCE_HEADER)?;
    }
    if let Some(w) = eigs.as_mut() {
        w.write_record(EIGENVALUES_HEADER)?;
    }
    for (ki, kind) in cfg.kinds.iter().enumerate() {
        for (oi, &omega) in cfg.omega_grid.iter().enumerate() {
            let spec = match calibrate_for_omega(*kind, d, omega) {
                Ok(s) => s,
                Err(e) => {
                    warn(&format!("{kind} at omega {omega}: {e}"));
                    continue;
                }
            };
            let realized = profile(&spec, d).omega;
            let analytical = match analytical_covariance(&spec, h) {
                Ok(c) => Some(c),
                Err(Error::UnsupportedFormula(_)) => None,
                Err(e) => return Err(e.into()),
            };
            let empirical = (cfg.n_samples > 0).then(|| {
                let seed = exp.seed ^ ((ki as u64) << 32 | oi as u64);
                empirical_covariance_mc(&spec, |r| h.sample(r), cfg.n_samples, 10, seed).mean
            });
            let trace_of = |m: &Matrix| (m * &h_inv).trace();
            if let Some(w) = traces.as_mut() {
                let gap = match (&analytical, &empirical) {
                    (Some(a), Some(e)) => linalg::relative_frobenius(e, &a.matrix).to_string(),
                    _ => String::new(),
                };
                w.write_record([
                    kind.to_string(),
                    omega.to_string(),
                    realized.to_string(),
                    spec.label(),
                    opt(analytical.as_ref().map(|a| trace_of(&a.matrix))),
                    opt(empirical.as_ref().map(trace_of)),
                    gap,
                    analytical
                        .as_ref()
                        .map(|a| a.is_upper_bound.to_string())
                        .unwrap_or_default(),
                ])?;
            }
            if let Some(w) = eigs.as_mut() {
                let sources = [("analytical", analytical.map(|a| a.matrix)), ("empirical", empirical)];
                for (source, m) in sources {
                    let Some(m) = m else { continue };
                    let (vals, _) = linalg::sym_eigen(&linalg::symmetrize(&m));
                    for (i, v) in vals.iter().enumerate() {
                        w.write_record([
                            kind.to_string(),
                            omega.to_string(),
                            source.to_string(),
                            i.to_string(),
                            v.to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    if let Some(mut w) = traces {
        w.flush()?;
    }
    if let Some(mut w) = eigs {
        w.flush()?;
    }
    Ok(())
}

/// Writes `theory.csv`; per-variant failures become flagged rows.
pub fn cmd_theory(exp: &ExperimentConfig) -> CliResult<()> {
    exp.validate_runs()?;
    let built = build_problem(&exp.problem)?;
    for w in &built.warnings {
        warn(w);
    }
    let variants = exp
        .runs
        .iter()
        .map(|v| resolve_variant(v, &built.problem, exp))
        .collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(&exp.outputs)?;
    write_theory(exp, &built, &variants)
}

fn heterogeneity(problem: &ProblemSpec, cfg: &TheoryConfig) -> CliResult<HeterogeneityMode> {
    if let Some(m) = cfg.mode {
        return Ok(m);
    }
    if problem.shares_w_star(1e-10) {
        Ok(HeterogeneityMode::CovariateShift)
    } else if problem.shares_covariance(1e-10) {
        Ok(HeterogeneityMode::ConceptShift)
    } else {
        Err(CliError::config(
            "clients differ in both optimum and covariance; set theory.mode",
        ))
    }
}

fn default_k_grid(horizon: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (1..)
        .map(|e| 10usize.pow(e))
        .take_while(|&k| k < horizon)
        .collect();
    ks.push(horizon);
    ks
}

pub fn noise_constants(
    problem: &ProblemSpec,
    compressor: &CompressorSpec,
    cfg: &TheoryConfig,
) -> CliResult<NoiseConstants> {
    if problem.n_clients() == 1 {
        Ok(constants_centralized(problem, compressor)?)
    } else {
        let mode = heterogeneity(problem, cfg)?;
        Ok(constants_federated(problem, &[*compressor], mode)?)
    }
}

fn admissible_gamma(c: &NoiseConstants, problem: &ProblemSpec, spec: &CompressorSpec) -> f64 {
    match max_gamma_linear(c, problem) {
        Some(g) if spec.is_linear() => g,
        _ => max_gamma_nonlinear(c, problem),
    }
}

fn write_theory(
    exp: &ExperimentConfig,
    built: &BuiltProblem,
    variants: &[ResolvedVariant],
) -> CliResult<()> {
    let problem = &built.problem;
    let ks = exp
        .theory
        .k_grid
        .clone()
        .unwrap_or_else(|| default_k_grid(exp.horizon));
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::config("theory.k_grid must hold positive horizons"));
    }
    let mut w = csv::Writer::from_path(exp.outputs.join("theory.csv"))?;
    w.write_record(THEORY_HEADER)?;
    for v in variants {
        let w0 = v
            .run
            .w0
            .as_ref()
            .map(|w| Vector::from_column_slice(w))
            .unwrap_or_else(|| Vector::zeros(problem.dim()));
        let eta0 = w0 - &problem.w_star_global;
        let consts = match noise_constants(problem, &v.compressor, &exp.theory) {
            Ok(c) => c,
            Err(e) if e.code == EXIT_CONFIG => {
                warn(&format!("{}: {}", v.name, e.message));
                let mut row = vec![v.name.clone(), v.compressor.label()];
                row.extend(std::iter::repeat_n(String::new(), THEORY_HEADER.len() - 3));
                row.push(e.message);
                w.write_record(&row)?;
                continue;
            }
            Err(e) => return Err(e),
        };
        for c in &consts.warnings {
            warn(&format!("{}: {c}", v.name));
        }
        for &k in &ks {
            let gamma = v.step_rule.gamma(k)?;
            let mut flags: Vec<String> = consts.warnings.clone();
            let mut cell = |which: &str, r: compressed_lsa::Result<f64>| match r {
                Ok(b) => b.to_string(),
                Err(e) => {
                    flags.push(format!("{which}: {e}"));
                    String::new()
                }
            };
            let nonlinear = cell("nonlinear", bound_theorem_nonlinear(&consts, problem, gamma, k, &eta0));
            let linear = if v.compressor.is_linear() {
                cell("linear", bound_theorem_linear(&consts, problem, gamma, k, &eta0))
            } else {
                String::new()
            };
            let corollary = match v.step_rule {
                StepSizeRule::HorizonPower { alpha_exp } => {
                    cell("corollary", bound_corollary_horizon(&consts, problem, k, alpha_exp, &eta0))
                }
                StepSizeRule::Constant { .. } => String::new(),
            };
            if !flags.is_empty() {
                warn(&format!("{} at K={k}: {}", v.name, flags.join("; ")));
            }
            w.write_record([
                v.name.clone(),
                v.compressor.label(),
                k.to_string(),
                gamma.to_string(),
                max_gamma_nonlinear(&consts, problem).to_string(),
                opt(max_gamma_linear(&consts, problem)),
                nonlinear,
                linear,
                corollary,
                consts.tr_ania_hinv.to_string(),
                consts.a.to_string(),
                consts.m1.to_string(),
                consts.m2.to_string(),
                opt(consts.sha_add),
                opt(consts.sha_mult),
                consts.omega.to_string(),
                flags.join("; "),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Sets the global worker pool size from `CLSA_WORKERS` when present.
pub fn init_workers() -> CliResult<()> {
    match std::env::var("CLSA_WORKERS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| CliError::config(format!("CLSA_WORKERS must be an integer, got {v:?}")))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::config(e.to_string()))
        }
        Err(_) => Ok(()),
    }
}
