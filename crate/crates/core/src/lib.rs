//! Compressed least-mean-squares and linear stochastic approximation.
//!
//! The crate covers randomized compression operators and their second-moment
//! ("covariance") behaviour, centralized and federated compressed SGD runners
//! on least-squares problems with Polyak-Ruppert averaging, closed-form
//! convergence bounds, and a small tabular data pipeline for building
//! empirical problems from CSV files.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod compressors;
pub mod covariance;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod rng;

pub use compressors::{
    calibrate_for_omega, compress, compress_coupled, profile, CompressorKind, CompressorProfile,
    CompressorSpec,
};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use model::{
    excess_loss, make_synthetic_covariance, sample_observation, stochastic_gradient, ClientSpec,
    CovarianceModel, ProblemSpec, Rotation, Sample,
};
pub use covariance::{
    analytical_covariance, compare_traces, compose_covariance, empirical_covariance,
    sha_constant, trace_diagnostic, CompCovResult,
};
pub use optimizer::{
    default_step_size, empirical_ania, run, slope_estimate, Algorithm, GradientMode, RunConfig,
    StepSizeRule, Trajectory,
};
