//! Unbiased randomized compression operators.
//!
//! Every operator is split into a random [`Draw`] and a deterministic
//! application, so one draw can be applied to several inputs (coupled
//! evaluation) and `compress` is just "draw, then apply once".

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// One compression operator and its parameters.
///
/// Serialized as `{"kind": "...", <params>}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorSpec {
    Identity,
    /// s-level stochastic quantization; `s = 1` is plain 1-quantization.
    QuantizeS { s: u32 },
    /// `Uᵀ C_s(U z)` with a fresh Haar rotation `U` per call.
    StabilizedQuantize { s: u32 },
    /// Keep a uniform `h`-subset of coordinates, scale by `d/h`.
    RandH { h: usize },
    /// Keep each coordinate independently with probability `p`, scale by `1/p`.
    Sparsify { p: f64 },
    /// Whole vector scaled by `1/p` with probability `p`, else zero.
    PartialParticipation { p: f64 },
    /// `(d/h) Φ⁺Φ z` with `Φ` an `h×d` standard Gaussian matrix.
    SketchGaussian { h: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    Identity,
    QuantizeS,
    StabilizedQuantize,
    RandH,
    Sparsify,
    PartialParticipation,
    SketchGaussian,
}

impl CompressorKind {
    pub const ALL: [CompressorKind; 7] = [
        CompressorKind::Identity,
        CompressorKind::QuantizeS,
        CompressorKind::StabilizedQuantize,
        CompressorKind::RandH,
        CompressorKind::Sparsify,
        CompressorKind::PartialParticipation,
        CompressorKind::SketchGaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompressorKind::Identity => "identity",
            CompressorKind::QuantizeS => "quantize_s",
            CompressorKind::StabilizedQuantize => "stabilized_quantize",
            CompressorKind::RandH => "rand_h",
            CompressorKind::Sparsify => "sparsify",
            CompressorKind::PartialParticipation => "partial_participation",
            CompressorKind::SketchGaussian => "sketch_gaussian",
        }
    }

    pub fn is_linear(self) -> bool {
        !matches!(
            self,
            CompressorKind::QuantizeS | CompressorKind::StabilizedQuantize
        )
    }
}

impl std::fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CompressorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CompressorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidCompressor(format!("unknown compressor kind '{s}'")))
    }
}

impl CompressorSpec {
    pub fn kind(&self) -> CompressorKind {
        match self {
            CompressorSpec::Identity => CompressorKind::Identity,
            CompressorSpec::QuantizeS { .. } => CompressorKind::QuantizeS,
            CompressorSpec::StabilizedQuantize { .. } => CompressorKind::StabilizedQuantize,
            CompressorSpec::RandH { .. } => CompressorKind::RandH,
            CompressorSpec::Sparsify { .. } => CompressorKind::Sparsify,
            CompressorSpec::PartialParticipation { .. } => CompressorKind::PartialParticipation,
            CompressorSpec::SketchGaussian { .. } => CompressorKind::SketchGaussian,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.kind().is_linear()
    }

    /// Plain 1-quantization.
    pub fn quantize() -> Self {
        CompressorSpec::QuantizeS { s: 1 }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::InvalidDimension("d must be at least 1".into()));
        }
        let bad = |msg: String| Err(Error::InvalidCompressor(msg));
        match *self {
            CompressorSpec::Identity => Ok(()),
            CompressorSpec::QuantizeS { s } | CompressorSpec::StabilizedQuantize { s } => {
                if s == 0 {
                    bad("quantization level s must be >= 1".into())
                } else {
                    Ok(())
                }
            }
            CompressorSpec::RandH { h } | CompressorSpec::SketchGaussian { h } => {
                if h == 0 || h > d {
                    bad(format!("h must lie in [1, {d}], got {h}"))
                } else {
                    Ok(())
                }
            }
            CompressorSpec::Sparsify { p } | CompressorSpec::PartialParticipation { p } => {
                if p > 0.0 && p <= 1.0 {
                    Ok(())
                } else {
                    bad(format!("p must lie in (0, 1], got {p}"))
                }
            }
        }
    }

    /// Keep probability `p` of the projection-based kinds (`h/d` for rand-h and sketch).
    pub fn keep_probability(&self, d: usize) -> Option<f64> {
        match *self {
            CompressorSpec::RandH { h } | CompressorSpec::SketchGaussian { h } => {
                Some(h as f64 / d as f64)
            }
            CompressorSpec::Sparsify { p } | CompressorSpec::PartialParticipation { p } => Some(p),
            CompressorSpec::Identity => Some(1.0),
            _ => None,
        }
    }

    /// Short label such as `sparsify(p=0.0909)`.
    pub fn label(&self) -> String {
        match *self {
            CompressorSpec::Identity => "identity".into(),
            CompressorSpec::QuantizeS { s } => format!("quantize_s(s={s})"),
            CompressorSpec::StabilizedQuantize { s } => format!("stabilized_quantize(s={s})"),
            CompressorSpec::RandH { h } => format!("rand_h(h={h})"),
            CompressorSpec::Sparsify { p } => format!("sparsify(p={p:.6})"),
            CompressorSpec::PartialParticipation { p } => {
                format!("partial_participation(p={p:.6})")
            }
            CompressorSpec::SketchGaussian { h } => format!("sketch_gaussian(h={h})"),
        }
    }
}

/// Worst-case relative variance ω and Hölder constant Ω.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressorProfile {
    pub omega: f64,
    pub omega_holder: f64,
    pub is_linear: bool,
}

pub fn profile(spec: &CompressorSpec, d: usize) -> CompressorProfile {
    let df = d as f64;
    let linear = |p: f64| CompressorProfile {
        omega: (1.0 - p) / p,
        omega_holder: 0.0,
        is_linear: true,
    };
    match *spec {
        CompressorSpec::Identity => linear(1.0),
        CompressorSpec::QuantizeS { s } | CompressorSpec::StabilizedQuantize { s } => {
            let s = s as f64;
            CompressorProfile {
                omega: (df / (s * s)).min(df.sqrt() / s),
                omega_holder: 12.0 * df.sqrt(),
                is_linear: false,
            }
        }
        CompressorSpec::RandH { h } | CompressorSpec::SketchGaussian { h } => {
            linear(h as f64 / df)
        }
        CompressorSpec::Sparsify { p } | CompressorSpec::PartialParticipation { p } => linear(p),
    }
}

/// Picks the parameter of `kind` whose ω is (closest to) `target_omega` in dimension `d`.
///
/// Rand-h and sketch round `h = d/(1+ω)` to the nearest integer, so the
/// realized ω (see [`profile`]) can differ from the target.
pub fn calibrate_for_omega(kind: CompressorKind, d: usize, target_omega: f64) -> Result<CompressorSpec> {
    let fail = |reason: &str| Error::Calibration {
        kind: kind.name().into(),
        target: target_omega,
        reason: reason.into(),
    };
    if d == 0 {
        return Err(Error::InvalidDimension("d must be at least 1".into()));
    }
    if !target_omega.is_finite() || target_omega < 0.0 {
        return Err(fail("omega must be finite and >= 0"));
    }
    let df = d as f64;
    let spec = match kind {
        CompressorKind::Identity => CompressorSpec::Identity,
        CompressorKind::Sparsify => CompressorSpec::Sparsify {
            p: 1.0 / (1.0 + target_omega),
        },
        CompressorKind::PartialParticipation => CompressorSpec::PartialParticipation {
            p: 1.0 / (1.0 + target_omega),
        },
        CompressorKind::RandH | CompressorKind::SketchGaussian => {
            let h = (df / (1.0 + target_omega)).round().clamp(1.0, df) as usize;
            if kind == CompressorKind::RandH {
                CompressorSpec::RandH { h }
            } else {
                CompressorSpec::SketchGaussian { h }
            }
        }
        CompressorKind::QuantizeS | CompressorKind::StabilizedQuantize => {
            if target_omega == 0.0 {
                return Err(fail("quantization always has omega > 0"));
            }
            let omega_at = |s: f64| (df / (s * s)).min(df.sqrt() / s);
            // ω(s) is decreasing; start from the closed-form guess and adjust.
            let guess = (df.sqrt() / target_omega).min((df / target_omega).sqrt());
            let mut s = guess.floor().max(1.0);
            while s > 1.0 && omega_at(s - 1.0) <= target_omega {
                s -= 1.0;
            }
            while omega_at(s) > target_omega {
                s += 1.0;
            }
            if s > u32::MAX as f64 {
                return Err(fail("required level exceeds u32"));
            }
            let s = s as u32;
            if kind == CompressorKind::QuantizeS {
                CompressorSpec::QuantizeS { s }
            } else {
                CompressorSpec::StabilizedQuantize { s }
            }
        }
    };
    Ok(spec)
}

/// The randomness of one compressor call, independent of its input.
#[derive(Debug, Clone)]
pub enum Draw {
    Identity,
    Quantize { s: u32, uniforms: Vec<f64> },
    Stabilized {
        s: u32,
        rotation: linalg::HaarRotation,
        uniforms: Vec<f64>,
    },
    Mask { keep: Vec<bool>, scale: f64 },
    Scalar(f64),
    /// `phi` is `h×d`; `chol` factors `Φ Φᵀ`.
    Sketch {
        phi: Matrix,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        scale: f64,
    },
}

impl Draw {
    pub fn sample<R: Rng + ?Sized>(spec: &CompressorSpec, d: usize, rng: &mut R) -> Draw {
        match *spec {
            CompressorSpec::Identity => Draw::Identity,
            CompressorSpec::QuantizeS { s } => Draw::Quantize {
                s,
                uniforms: (0..d).map(|_| rng.random::<f64>()).collect(),
            },
            CompressorSpec::StabilizedQuantize { s } => {
                let rotation = linalg::HaarRotation::sample(d, rng);
                Draw::Stabilized {
                    s,
                    rotation,
                    uniforms: (0..d).map(|_| rng.random::<f64>()).collect(),
                }
            }
            CompressorSpec::RandH { h } => {
                let mut keep = vec![false; d];
                for i in sample_indices(rng, d, h) {
                    keep[i] = true;
                }
                Draw::Mask {
                    keep,
                    scale: d as f64 / h as f64,
                }
            }
            CompressorSpec::Sparsify { p } => Draw::Mask {
                keep: (0..d).map(|_| rng.random::<f64>() < p).collect(),
                scale: 1.0 / p,
            },
            CompressorSpec::PartialParticipation { p } => {
                Draw::Scalar(if rng.random::<f64>() < p { 1.0 / p } else { 0.0 })
            }
            CompressorSpec::SketchGaussian { h } => loop {
                let phi = linalg::gaussian_matrix(h, d, rng);
                let gram = &phi * phi.transpose();
                // ΦΦᵀ is singular with probability zero; redraw if it happens.
                if let Some(chol) = gram.cholesky() {
                    break Draw::Sketch {
                        phi,
                        chol,
                        scale: d as f64 / h as f64,
                    };
                }
            },
        }
    }

    pub fn apply(&self, z: &Vector) -> Vector {
        match self {
            Draw::Identity => z.clone(),
            Draw::Quantize { s, uniforms } => quantize(z, *s, uniforms),
            Draw::Stabilized {
                s,
                rotation,
                uniforms,
            } => {
                let rotated = rotation.apply(z);
                rotation.apply_transpose(&quantize(&rotated, *s, uniforms))
            }
            Draw::Mask { keep, scale } => Vector::from_iterator(
                z.len(),
                z.iter()
                    .zip(keep)
                    .map(|(&v, &k)| if k { v * scale } else { 0.0 }),
            ),
            Draw::Scalar(c) => z * *c,
            Draw::Sketch { phi, chol, scale } => {
                let y = chol.solve(&(phi * z));
                phi.tr_mul(&y) * *scale
            }
        }
    }
}

fn quantize(z: &Vector, s: u32, uniforms: &[f64]) -> Vector {
    let norm = z.norm();
    if norm == 0.0 {
        return Vector::zeros(z.len());
    }
    let sf = s as f64;
    Vector::from_iterator(
        z.len(),
        z.iter().zip(uniforms).map(|(&v, &u)| {
            if v == 0.0 {
                return 0.0;
            }
            let r = sf * v.abs() / norm;
            let low = r.floor();
            let chi = if u < r - low { low + 1.0 } else { low };
            v.signum() * norm * chi / sf
        }),
    )
}

/// One draw of `C(z)`.
pub fn compress<R: Rng + ?Sized>(spec: &CompressorSpec, z: &Vector, rng: &mut R) -> Vector {
    Draw::sample(spec, z.len(), rng).apply(z)
}

/// `C(z1)` and `C(z2)` under one shared draw.
pub fn compress_coupled<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    z1: &Vector,
    z2: &Vector,
    rng: &mut R,
) -> (Vector, Vector) {
    assert_eq!(z1.len(), z2.len(), "coupled inputs must share a dimension");
    let draw = Draw::sample(spec, z1.len(), rng);
    (draw.apply(z1), draw.apply(z2))
}
