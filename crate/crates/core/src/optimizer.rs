//! Runners for the compressed LMS recursions with Polyak-Ruppert averaging.
//!
//! Per iteration each client forms a (batch or analytic) gradient at the
//! current iterate, optionally compresses it (with or without a memory
//! term), and the server takes one step with the average of the N
//! contributions. Data and compression randomness come from separate
//! streams per (repeat, client), so LMS and identity-compressed runs see
//! exactly the same samples.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressors::{compress, profile, CompressorSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{excess_loss, ClientSpec, ProblemSpec};
use crate::rng::{stream, Role, StreamKey, StreamRng};

const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Lms,
    CompressedCentral,
    CompressedDistributed,
    CompressedDistributedMemory,
}

impl Algorithm {
    pub fn uses_compression(self) -> bool {
        self != Algorithm::Lms
    }
}

/// `γ` is fixed for the whole run; `horizon_power` sets it to `K^{-α}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSizeRule {
    Constant { gamma: f64 },
    HorizonPower { alpha_exp: f64 },
}

impl StepSizeRule {
    pub fn gamma(&self, horizon: usize) -> Result<f64> {
        match *self {
            StepSizeRule::Constant { gamma } => {
                if gamma > 0.0 && gamma.is_finite() {
                    Ok(gamma)
                } else {
                    Err(Error::Config(format!("step size must be > 0, got {gamma}")))
                }
            }
            StepSizeRule::HorizonPower { alpha_exp } => {
                if alpha_exp > 0.0 && alpha_exp < 1.0 {
                    Ok((horizon as f64).powf(-alpha_exp))
                } else {
                    Err(Error::Config(format!(
                        "horizon exponent must lie in (0, 1), got {alpha_exp}"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Mini-batch of fresh samples per client and iteration.
    #[default]
    Stochastic,
    /// Exact local gradient `Hᵢ(w − w*ᵢ)`; compression still applies.
    Analytic,
}

fn default_batch() -> usize {
    1
}

fn default_repeats() -> usize {
    1
}

fn default_ppd() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// One spec per client, or a single spec shared by all clients.
    #[serde(default)]
    pub compressors: Vec<CompressorSpec>,
    pub step_rule: StepSizeRule,
    pub horizon: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Starting point; zeros when absent.
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    /// Memory step `α`; defaults to `1/(2(ωᵢ+1))` per client.
    #[serde(default)]
    pub memory_rate: Option<f64>,
    #[serde(default = "default_repeats")]
    pub n_repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ppd")]
    pub points_per_decade: usize,
    #[serde(default)]
    pub gradient_mode: GradientMode,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, compressors: Vec<CompressorSpec>, step_rule: StepSizeRule, horizon: usize) -> Self {
        Self {
            algorithm,
            compressors,
            step_rule,
            horizon,
            batch_size: 1,
            w0: None,
            memory_rate: None,
            n_repeats: 1,
            seed: 0,
            points_per_decade: 50,
            gradient_mode: GradientMode::Stochastic,
        }
    }

    pub fn lms(gamma: f64, horizon: usize) -> Self {
        Self::new(Algorithm::Lms, vec![], StepSizeRule::Constant { gamma }, horizon)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_repeats(mut self, n: usize) -> Self {
        self.n_repeats = n;
        self
    }

    pub fn with_batch(mut self, b: usize) -> Self {
        self.batch_size = b;
        self
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    pub fn with_w0(mut self, w0: Vector) -> Self {
        self.w0 = Some(w0.iter().copied().collect());
        self
    }

    /// Compressor of client `i` (identity for LMS).
    pub fn compressor(&self, i: usize) -> CompressorSpec {
        match self.compressors.len() {
            0 => CompressorSpec::Identity,
            1 => self.compressors[0],
            _ => self.compressors[i],
        }
    }

    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        let n = problem.n_clients();
        let d = problem.dim();
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.n_repeats == 0 {
            return Err(Error::Config("n_repeats must be >= 1".into()));
        }
        if self.points_per_decade == 0 {
            return Err(Error::Config("points_per_decade must be >= 1".into()));
        }
        self.step_rule.gamma(self.horizon)?;
        if let Some(w0) = &self.w0 {
            if w0.len() != d {
                return Err(Error::InvalidDimension(format!(
                    "w0 has length {} but the problem is {d}-dimensional",
                    w0.len()
                )));
            }
        }
        if self.algorithm.uses_compression() {
            match self.compressors.len() {
                0 => {
                    return Err(Error::Config(
                        "compressed algorithms need at least one compressor".into(),
                    ))
                }
                1 => {}
                m if m != n => {
                    return Err(Error::Config(format!(
                        "{m} compressors given for {n} clients"
                    )))
                }
                _ => {}
            }
            for spec in &self.compressors {
                spec.validate(d)?;
            }
        }
        if self.algorithm == Algorithm::CompressedCentral && n != 1 {
            return Err(Error::Config(format!(
                "compressed_central needs a single client, got {n}"
            )));
        }
        if let Some(a) = self.memory_rate {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("memory rate must lie in (0, 1], got {a}")));
            }
        }
        Ok(())
    }

    fn memory_rate_for(&self, i: usize, d: usize) -> f64 {
        self.memory_rate
            .unwrap_or_else(|| 1.0 / (2.0 * (profile(&self.compressor(i), d).omega + 1.0)))
    }
}

/// Recorded losses of one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub repeat: usize,
    pub gamma: f64,
    pub iters: Vec<usize>,
    /// `F(w_k) − F(w*)`.
    pub loss_last: Vec<f64>,
    /// `F(w̄) − F(w*)` with `w̄` the mean of `w_0, …, w_{k−1}`.
    pub loss_avg: Vec<f64>,
    pub final_w: Vec<f64>,
    pub final_w_avg: Vec<f64>,
    /// Mean over clients of `‖hᵢ − ∇Fᵢ(w*)‖` (memory algorithm only).
    pub memory_gap: Option<Vec<f64>>,
    pub memory_gap_initial: Option<f64>,
}

impl Trajectory {
    pub const CSV_HEADER: [&'static str; 4] = ["iter", "loss_last", "loss_avg", "memory_gap"];

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for (j, k) in self.iters.iter().enumerate() {
            let gap = self
                .memory_gap
                .as_ref()
                .map(|g| g[j].to_string())
                .unwrap_or_default();
            w.write_record([
                k.to_string(),
                self.loss_last[j].to_string(),
                self.loss_avg[j].to_string(),
                gap,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_loss_avg(&self) -> f64 {
        *self.loss_avg.last().expect("trajectories are never empty")
    }
}

/// Log-spaced indices in `[1, k]`, always ending with `k`.
pub fn record_points(k: usize, points_per_decade: usize) -> Vec<usize> {
    let mut pts: Vec<usize> = Vec::new();
    let mut j = 0u32;
    loop {
        let v = 10f64.powf(j as f64 / points_per_decade as f64).round() as usize;
        if v >= k {
            break;
        }
        if pts.last() != Some(&v) {
            pts.push(v);
        }
        j += 1;
    }
    pts.push(k);
    pts
}

/// Source of `(x, y)` observations for one client.
pub trait SampleSource {
    /// Writes the features into `x` and returns the label.
    fn draw(&mut self, x: &mut Vector) -> f64;
}

pub struct GaussianSource<'a> {
    client: &'a ClientSpec,
    rng: StreamRng,
    scratch: Vector,
}

impl<'a> GaussianSource<'a> {
    pub fn new(client: &'a ClientSpec, rng: StreamRng) -> Self {
        Self {
            client,
            rng,
            scratch: Vector::zeros(client.dim()),
        }
    }
}

impl SampleSource for GaussianSource<'_> {
    fn draw(&mut self, x: &mut Vector) -> f64 {
        self.client.sample_into(x, &mut self.scratch, &mut self.rng)
    }
}

/// Cycles through a dataset, reshuffling at the start of every epoch.
pub struct DatasetSource<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    rng: StreamRng,
}

impl<'a> DatasetSource<'a> {
    pub fn new(data: &'a Dataset, rng: StreamRng) -> Self {
        Self {
            order: (0..data.n_rows()).collect(),
            pos: data.n_rows(),
            data,
            rng,
        }
    }
}

impl SampleSource for DatasetSource<'_> {
    fn draw(&mut self, x: &mut Vector) -> f64 {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let r = self.order[self.pos];
        self.pos += 1;
        for (j, v) in x.iter_mut().enumerate() {
            *v = self.data.rows[(r, j)];
        }
        self.data.labels[r]
    }
}

/// Runs every repeat on Gaussian data drawn from the problem's clients.
pub fn run(problem: &ProblemSpec, config: &RunConfig) -> Result<Vec<Trajectory>> {
    config.validate(problem)?;
    (0..config.n_repeats)
        .into_par_iter()
        .map(|r| {
            let mut sources: Vec<GaussianSource> = problem
                .clients
                .iter()
                .enumerate()
                .map(|(i, c)| GaussianSource::new(c, data_stream(config.seed, r, i)))
                .collect();
            run_repeat(problem, config, r, &mut sources)
        })
        .collect()
}

/// Runs every repeat on observed data, one dataset per client.
pub fn run_on_datasets(problem: &ProblemSpec, config: &RunConfig, datasets: &[Dataset]) -> Result<Vec<Trajectory>> {
    config.validate(problem)?;
    if datasets.len() != problem.n_clients() {
        return Err(Error::Config(format!(
            "{} datasets for {} clients",
            datasets.len(),
            problem.n_clients()
        )));
    }
    for ds in datasets {
        if ds.n_rows() == 0 || ds.dim() != problem.dim() {
            return Err(Error::InvalidDimension(
                "client datasets must be non-empty and match the problem dimension".into(),
            ));
        }
    }
    (0..config.n_repeats)
        .into_par_iter()
        .map(|r| {
            let mut sources: Vec<DatasetSource> = datasets
                .iter()
                .enumerate()
                .map(|(i, ds)| DatasetSource::new(ds, data_stream(config.seed, r, i)))
                .collect();
            run_repeat(problem, config, r, &mut sources)
        })
        .collect()
}

fn data_stream(seed: u64, repeat: usize, client: usize) -> StreamRng {
    stream(seed, StreamKey::new(repeat as u32, client as u32, Role::Data))
}

fn compression_stream(seed: u64, repeat: usize, client: usize) -> StreamRng {
    stream(seed, StreamKey::new(repeat as u32, client as u32, Role::Compression))
}

/// One repeat with caller-provided sample sources (one per client).
pub fn run_repeat<S: SampleSource>(
    problem: &ProblemSpec,
    config: &RunConfig,
    repeat: usize,
    sources: &mut [S],
) -> Result<Trajectory> {
    config.validate(problem)?;
    let d = problem.dim();
    let n = problem.n_clients();
    if sources.len() != n {
        return Err(Error::Config(format!("{} sources for {n} clients", sources.len())));
    }
    let k_max = config.horizon;
    let gamma = config.step_rule.gamma(k_max)?;
    let memory = config.algorithm == Algorithm::CompressedDistributedMemory;

    let specs: Vec<CompressorSpec> = (0..n).map(|i| config.compressor(i)).collect();
    let rates: Vec<f64> = (0..n).map(|i| config.memory_rate_for(i, d)).collect();
    let mut comp_rngs: Vec<StreamRng> = (0..n)
        .map(|i| compression_stream(config.seed, repeat, i))
        .collect();
    let grad_star: Vec<Vector> = problem
        .clients
        .iter()
        .map(|c| c.gradient(&problem.w_star_global))
        .collect();
    let mut h: Vec<Vector> = if memory {
        vec![Vector::zeros(d); n]
    } else {
        Vec::new()
    };
    let gap = |h: &[Vector]| {
        h.iter()
            .zip(&grad_star)
            .map(|(hi, gi)| (hi - gi).norm())
            .sum::<f64>()
            / n as f64
    };

    let mut w = match &config.w0 {
        Some(v) => Vector::from_column_slice(v),
        None => Vector::zeros(d),
    };
    let mut avg = Vector::zeros(d);
    let points = record_points(k_max, config.points_per_decade);
    let mut traj = Trajectory {
        repeat,
        gamma,
        iters: Vec::with_capacity(points.len()),
        loss_last: Vec::with_capacity(points.len()),
        loss_avg: Vec::with_capacity(points.len()),
        final_w: Vec::new(),
        final_w_avg: Vec::new(),
        memory_gap: memory.then(|| Vec::with_capacity(points.len())),
        memory_gap_initial: memory.then(|| gap(&h)),
    };

    let mut x = Vector::zeros(d);
    let mut g = Vector::zeros(d);
    let mut total = Vector::zeros(d);
    let inv_b = 1.0 / config.batch_size as f64;
    let step = gamma / n as f64;
    let mut next = 0;

    for k in 1..=k_max {
        // avg ← mean(w_0, …, w_{k−1})
        let wk = 1.0 / k as f64;
        avg.axpy(wk, &w, 1.0 - wk);

        total.fill(0.0);
        for i in 0..n {
            match config.gradient_mode {
                GradientMode::Analytic => {
                    let client = &problem.clients[i];
                    client
                        .covariance
                        .matrix()
                        .mul_to(&(&w - &client.w_star_local), &mut g);
                }
                GradientMode::Stochastic => {
                    g.fill(0.0);
                    for _ in 0..config.batch_size {
                        let y = sources[i].draw(&mut x);
                        let r = x.dot(&w) - y;
                        g.axpy(r, &x, 1.0);
                    }
                    if config.batch_size > 1 {
                        g *= inv_b;
                    }
                }
            }
            match config.algorithm {
                Algorithm::Lms => total += &g,
                Algorithm::CompressedCentral | Algorithm::CompressedDistributed => {
                    total += compress(&specs[i], &g, &mut comp_rngs[i]);
                }
                Algorithm::CompressedDistributedMemory => {
                    let delta = compress(&specs[i], &(&g - &h[i]), &mut comp_rngs[i]);
                    total += &delta;
                    total += &h[i];
                    h[i].axpy(rates[i], &delta, 1.0);
                }
            }
        }
        w.axpy(-step, &total, 1.0);

        let norm = w.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Divergence { iteration: k });
        }
        if k == points[next] {
            traj.iters.push(k);
            traj.loss_last.push(excess_loss(problem, &w));
            traj.loss_avg.push(excess_loss(problem, &avg));
            if let Some(mg) = traj.memory_gap.as_mut() {
                mg.push(gap(&h));
            }
            next += 1;
        }
    }
    traj.final_w = w.iter().copied().collect();
    traj.final_w_avg = avg.iter().copied().collect();
    Ok(traj)
}

/// `γ = 1/(2(ω+1)R̄²)` and whether it meets `γ(R_F² + 2ℳ₂) ≤ ½` with `ℳ₂ = (ω+1)R̄²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefaultStep {
    pub gamma: f64,
    pub satisfies_nonlinear_precondition: bool,
}

pub fn default_step_size(problem: &ProblemSpec, omega: f64) -> Result<DefaultStep> {
    let r2 = problem.mean_trace();
    if !(r2 > 0.0) {
        return Err(Error::Config("mean feature trace must be > 0".into()));
    }
    if !(omega >= 0.0) {
        return Err(Error::Config(format!("omega must be >= 0, got {omega}")));
    }
    let gamma = 1.0 / (2.0 * (omega + 1.0) * r2);
    let m2 = (omega + 1.0) * r2;
    let lhs = gamma * (problem.hessian.trace() + 2.0 * m2);
    Ok(DefaultStep {
        gamma,
        satisfies_nonlinear_precondition: lhs <= 0.5,
    })
}

/// Monte-Carlo second moment of the additive noise at `w*`:
/// `ξ = (1/N) Σᵢ Cᵢ(gᵢ(w*) − mᵢ)` with `mᵢ = ∇Fᵢ(w*)` for the memory
/// algorithm and 0 otherwise (uncompressed for LMS). Each `gᵢ` averages
/// `config.batch_size` samples.
pub fn empirical_ania<R: Rng + ?Sized>(
    problem: &ProblemSpec,
    config: &RunConfig,
    n_samples: usize,
    rng: &mut R,
) -> Result<Matrix> {
    config.validate(problem)?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let d = problem.dim();
    let n = problem.n_clients();
    let w_star = &problem.w_star_global;
    let memory = config.algorithm == Algorithm::CompressedDistributedMemory;
    let shifts: Vec<Vector> = problem
        .clients
        .iter()
        .map(|c| if memory { c.gradient(w_star) } else { Vector::zeros(d) })
        .collect();
    let mut acc = Matrix::zeros(d, d);
    let mut x = Vector::zeros(d);
    let mut scratch = Vector::zeros(d);
    let mut g = Vector::zeros(d);
    let mut xi = Vector::zeros(d);
    for _ in 0..n_samples {
        xi.fill(0.0);
        for (i, client) in problem.clients.iter().enumerate() {
            g.fill(0.0);
            for _ in 0..config.batch_size {
                let y = client.sample_into(&mut x, &mut scratch, rng);
                g.axpy(x.dot(w_star) - y, &x, 1.0);
            }
            g /= config.batch_size as f64;
            g -= &shifts[i];
            if config.algorithm.uses_compression() {
                xi += compress(&config.compressor(i), &g, rng);
            } else {
                xi += &g;
            }
        }
        xi /= n as f64;
        acc.ger(1.0, &xi, &xi, 1.0);
    }
    Ok(acc / n_samples as f64)
}

/// Least-squares slope of `log₁₀ loss_avg` against `log₁₀ iter` on `[k_lo, k_hi]`.
pub fn slope_estimate(traj: &Trajectory, k_lo: usize, k_hi: usize) -> Result<f64> {
    log_log_slope(&traj.iters, &traj.loss_avg, k_lo, k_hi)
}

pub fn log_log_slope(iters: &[usize], values: &[f64], k_lo: usize, k_hi: usize) -> Result<f64> {
    if k_lo >= k_hi {
        return Err(Error::InsufficientData(format!(
            "empty slope window [{k_lo}, {k_hi}]"
        )));
    }
    let pts: Vec<(f64, f64)> = iters
        .iter()
        .zip(values)
        .filter(|(&k, &v)| k >= k_lo && k <= k_hi && v > 0.0)
        .map(|(&k, &v)| ((k as f64).log10(), v.log10()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} positive points in [{k_lo}, {k_hi}]",
            pts.len()
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

/// Pointwise mean of `loss_avg` over repeats sharing the same record points.
pub fn mean_loss_avg(trajs: &[Trajectory]) -> Vec<f64> {
    let len = trajs[0].loss_avg.len();
    (0..len)
        .map(|j| trajs.iter().map(|t| t.loss_avg[j]).sum::<f64>() / trajs.len() as f64)
        .collect()
}
