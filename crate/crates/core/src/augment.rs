//! Stochastic view transforms and positive-pair construction for
//! contrastive pretraining.
//!
//! Every transform takes an explicit [`RngStream`], so a pair is a pure
//! function of (cloud, config, stream keys) and reproduces bit-exactly.

use std::str::FromStr;

use thiserror::Error;

use crate::cloud::PointCloud;
use crate::rng::RngStream;

pub const DEFAULT_JITTER_SIGMA: f64 = 0.01;
pub const DEFAULT_JITTER_CLIP: f64 = 0.05;
pub const DEFAULT_PERTURB_ANGLE: f64 = 0.06;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation parameter {name} must be ≥ 0, got {value}")]
    NegativeParameter { name: &'static str, value: f64 },
    #[error("unknown augmentation kind {0:?} (expected jitter | rotation | perturbation | jitter+perturbation)")]
    UnknownKind(String),
}

/// Which transform builds the two views of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Jitter,
    Rotation,
    Perturbation,
    /// Asymmetric: view A is jittered, view B is perturbed.
    JitterPerturbation,
}

impl AugmentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentKind::Jitter => "jitter",
            AugmentKind::Rotation => "rotation",
            AugmentKind::Perturbation => "perturbation",
            AugmentKind::JitterPerturbation => "jitter+perturbation",
        }
    }
}

impl FromStr for AugmentKind {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, AugmentError> {
        match s {
            "jitter" => Ok(AugmentKind::Jitter),
            "rotation" => Ok(AugmentKind::Rotation),
            "perturbation" => Ok(AugmentKind::Perturbation),
            "jitter+perturbation" => Ok(AugmentKind::JitterPerturbation),
            other => Err(AugmentError::UnknownKind(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    pub sigma: f64,
    pub clip: f64,
    pub max_perturb_angle: f64,
    /// Restore unit normals after jitter. Off by default: the noise is added
    /// to "every coordinate and normal" verbatim.
    pub renormalize_normals: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            kind: AugmentKind::Jitter,
            sigma: DEFAULT_JITTER_SIGMA,
            clip: DEFAULT_JITTER_CLIP,
            max_perturb_angle: DEFAULT_PERTURB_ANGLE,
            renormalize_normals: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, value) in [
            ("sigma", self.sigma),
            ("clip", self.clip),
            ("max_perturb_angle", self.max_perturb_angle),
        ] {
            if !(value >= 0.0) {
                return Err(AugmentError::NegativeParameter { name, value });
            }
        }
        Ok(())
    }
}

/// Two independently transformed views of one source cloud. View A feeds
/// encoder branch 1, view B feeds branch 2.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub view_a: PointCloud,
    pub view_b: PointCloud,
    pub source_id: usize,
}

/// Add truncated Gaussian noise to every coordinate and normal component:
/// independent `N(0, sigma²)` draws clamped to `[-clip, clip]`. Labels and
/// point order are untouched.
pub fn jitter(
    cloud: &PointCloud,
    sigma: f64,
    clip: f64,
    renormalize_normals: bool,
    rng: &mut RngStream,
) -> PointCloud {
    let mut out = cloud.clone();
    for p in &mut out.coords {
        for v in p.iter_mut() {
            *v += (rng.normal() * sigma).clamp(-clip, clip);
        }
    }
    for nrm in &mut out.normals {
        for v in nrm.iter_mut() {
            *v += (rng.normal() * sigma).clamp(-clip, clip);
        }
        if renormalize_normals {
            let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
            if len > 0.0 {
                for v in nrm.iter_mut() {
                    *v /= len;
                }
            }
        }
    }
    out
}

fn apply_matrix(cloud: &PointCloud, r: &[[f64; 3]; 3]) -> PointCloud {
    let rot = |v: &[f64; 3]| {
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    };
    PointCloud {
        coords: cloud.coords.iter().map(&rot).collect(),
        normals: cloud.normals.iter().map(&rot).collect(),
        labels: cloud.labels.clone(),
    }
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Rotate coordinates and normals by `theta` about the Y axis:
/// `x' = x cosθ + z sinθ`, `z' = −x sinθ + z cosθ`.
pub fn rotate_y_by(cloud: &PointCloud, theta: f64) -> PointCloud {
    apply_matrix(cloud, &rot_y(theta))
}

/// Random Y-axis rotation, `θ ~ Uniform[0, 2π)`.
pub fn rotate_y(cloud: &PointCloud, rng: &mut RngStream) -> PointCloud {
    rotate_y_by(cloud, rng.range(0.0, std::f64::consts::TAU))
}

/// Rotate by `R = Rz(az)·Ry(ay)·Rx(ax)`, applied to coordinates and normals.
pub fn perturb_by(cloud: &PointCloud, ax: f64, ay: f64, az: f64) -> PointCloud {
    let r = matmul3(&rot_z(az), &matmul3(&rot_y(ay), &rot_x(ax)));
    apply_matrix(cloud, &r)
}

/// Small random rotation about all three axes; each angle is drawn uniformly
/// from `[-max_angle, max_angle]` in x, y, z order.
pub fn perturb(cloud: &PointCloud, max_angle: f64, rng: &mut RngStream) -> PointCloud {
    let ax = rng.range(-max_angle, max_angle);
    let ay = rng.range(-max_angle, max_angle);
    let az = rng.range(-max_angle, max_angle);
    perturb_by(cloud, ax, ay, az)
}

fn apply_kind(
    cloud: &PointCloud,
    kind: AugmentKind,
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> PointCloud {
    match kind {
        AugmentKind::Jitter => jitter(cloud, cfg.sigma, cfg.clip, cfg.renormalize_normals, rng),
        AugmentKind::Rotation => rotate_y(cloud, rng),
        AugmentKind::Perturbation => perturb(cloud, cfg.max_perturb_angle, rng),
        AugmentKind::JitterPerturbation => {
            unreachable!("asymmetric kind is split before dispatch")
        }
    }
}

/// Build a positive pair from independent streams. For the combined kind the
/// two transforms split across the views: A jittered, B perturbed.
pub fn make_pair(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    rng_a: &mut RngStream,
    rng_b: &mut RngStream,
    source_id: usize,
) -> AugmentedPair {
    let (kind_a, kind_b) = match cfg.kind {
        AugmentKind::JitterPerturbation => (AugmentKind::Jitter, AugmentKind::Perturbation),
        k => (k, k),
    };
    AugmentedPair {
        view_a: apply_kind(cloud, kind_a, cfg, rng_a),
        view_b: apply_kind(cloud, kind_b, cfg, rng_b),
        source_id,
    }
}
