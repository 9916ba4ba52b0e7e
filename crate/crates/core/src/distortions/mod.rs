//! Deterministic image distortions.
//!
//! Six geometric warps (barrel, perspective, arc, polar, tile, affine) produce the
//! pseudo-outliers used while training the head. Four milder corruptions (random cut,
//! random crop-and-resize, additive noise, Gaussian blur) are reserved for building
//! generated validation sets.
//!
//! Warps are inverse mappings: each output pixel center is mapped to a source
//! coordinate that is resampled bilinearly. Source coordinates outside the image
//! footprint read black.

mod corrupt;
mod warp;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TendError};
use crate::image::{ImageSample, Label, Split};
use crate::rng;

pub use warp::Homography;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Barrel,
    Perspective,
    Arc,
    Polar,
    Tile,
    Affine,
    RandomCut,
    RandomCropResize,
    Noise,
    GaussianBlur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    TrainSet,
    ValSet,
}

impl DistortionKind {
    pub const TRAIN: [DistortionKind; 6] = [
        DistortionKind::Barrel,
        DistortionKind::Perspective,
        DistortionKind::Arc,
        DistortionKind::Polar,
        DistortionKind::Tile,
        DistortionKind::Affine,
    ];

    pub const VALIDATION: [DistortionKind; 4] = [
        DistortionKind::RandomCut,
        DistortionKind::RandomCropResize,
        DistortionKind::Noise,
        DistortionKind::GaussianBlur,
    ];

    pub fn family(self) -> Family {
        use DistortionKind::*;
        match self {
            Barrel | Perspective | Arc | Polar | Tile | Affine => Family::TrainSet,
            RandomCut | RandomCropResize | Noise | GaussianBlur => Family::ValSet,
        }
    }

    pub fn name(self) -> &'static str {
        use DistortionKind::*;
        match self {
            Barrel => "barrel",
            Perspective => "perspective",
            Arc => "arc",
            Polar => "polar",
            Tile => "tile",
            Affine => "affine",
            RandomCut => "random_cut",
            RandomCropResize => "random_crop_resize",
            Noise => "noise",
            GaussianBlur => "gaussian_blur",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = TendError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        DistortionKind::TRAIN
            .iter()
            .chain(DistortionKind::VALIDATION.iter())
            .copied()
            .find(|k| k.name() == norm)
            .ok_or_else(|| TendError::Config(format!("unknown distortion kind `{s}`")))
    }
}

/// A distortion with its kind-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Distortion {
    /// Radial polynomial on the normalized radius: `r_src = r_dst * (a r³ + b r² + c r + d)`.
    Barrel { a: f64, b: f64, c: f64, d: f64 },
    /// Destination corner offsets (TL, TR, BR, BL) as fractions of the side length.
    Perspective { offsets: [[f64; 2]; 4] },
    /// Wrap the image around a circular arc spanning `angle_deg` degrees.
    Arc { angle_deg: f64 },
    /// Cartesian to polar unwrap about the image center.
    Polar,
    /// Shrink to `1/k` of the side and replicate `k × k` times.
    Tile { k: u32 },
    /// Row-major 2×3 forward matrix `[a, b, tx, c, d, ty]`, applied about the image center
    /// with translation in pixels.
    Affine { matrix: [f64; 6] },
    /// Erase a black rectangle covering `area_fraction` of the image.
    RandomCut { area_fraction: f64 },
    /// Crop a square window of `side_fraction` of the side and resize back.
    RandomCropResize { side_fraction: f64 },
    /// Additive i.i.d. Gaussian noise.
    Noise { sigma: f64 },
    /// Separable Gaussian blur with kernel standard deviation in pixels.
    GaussianBlur { sigma: f64 },
}

impl Distortion {
    pub fn kind(&self) -> DistortionKind {
        match self {
            Distortion::Barrel { .. } => DistortionKind::Barrel,
            Distortion::Perspective { .. } => DistortionKind::Perspective,
            Distortion::Arc { .. } => DistortionKind::Arc,
            Distortion::Polar => DistortionKind::Polar,
            Distortion::Tile { .. } => DistortionKind::Tile,
            Distortion::Affine { .. } => DistortionKind::Affine,
            Distortion::RandomCut { .. } => DistortionKind::RandomCut,
            Distortion::RandomCropResize { .. } => DistortionKind::RandomCropResize,
            Distortion::Noise { .. } => DistortionKind::Noise,
            Distortion::GaussianBlur { .. } => DistortionKind::GaussianBlur,
        }
    }

    /// Representative mid-range parameters for each kind.
    pub fn default_for(kind: DistortionKind) -> Self {
        match kind {
            DistortionKind::Barrel => Distortion::Barrel { a: 0.2, b: 0.1, c: 0.0, d: 0.7 },
            DistortionKind::Perspective => Distortion::Perspective {
                offsets: [[0.2, 0.1], [-0.15, 0.0], [-0.05, -0.2], [0.1, -0.05]],
            },
            DistortionKind::Arc => Distortion::Arc { angle_deg: 60.0 },
            DistortionKind::Polar => Distortion::Polar,
            DistortionKind::Tile => Distortion::Tile { k: 3 },
            DistortionKind::Affine => Distortion::Affine {
                matrix: affine_matrix(20.0, 0.2),
            },
            DistortionKind::RandomCut => Distortion::RandomCut { area_fraction: 0.2 },
            DistortionKind::RandomCropResize => Distortion::RandomCropResize { side_fraction: 0.65 },
            DistortionKind::Noise => Distortion::Noise { sigma: 0.1 },
            DistortionKind::GaussianBlur => Distortion::GaussianBlur { sigma: 3.0 },
        }
    }

    /// Identity affine matrix.
    pub fn affine_identity() -> Self {
        Distortion::Affine {
            matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(TendError::Parameter(format!("{name} must be finite, got {v}")))
            }
        };
        match *self {
            Distortion::Barrel { a, b, c, d } => {
                for (n, v) in [("a", a), ("b", b), ("c", c), ("d", d)] {
                    finite(n, v)?;
                }
            }
            Distortion::Perspective { offsets } => {
                for o in offsets.iter().flatten() {
                    finite("corner offset", *o)?;
                    if o.abs() >= 0.5 {
                        return Err(TendError::Parameter(format!(
                            "perspective corner offset {o} must be below half the side"
                        )));
                    }
                }
            }
            Distortion::Arc { angle_deg } => {
                finite("arc angle", angle_deg)?;
                if !(angle_deg > 0.0 && angle_deg <= 360.0) {
                    return Err(TendError::Parameter(format!(
                        "arc angle must be in (0, 360] degrees, got {angle_deg}"
                    )));
                }
            }
            Distortion::Polar => {}
            Distortion::Tile { k } => {
                if k == 0 {
                    return Err(TendError::Parameter("tile factor must be at least 1".into()));
                }
            }
            Distortion::Affine { matrix } => {
                for v in matrix {
                    finite("affine entry", v)?;
                }
                let det = matrix[0] * matrix[4] - matrix[1] * matrix[3];
                if det.abs() < 1e-9 {
                    return Err(TendError::Parameter("affine matrix is singular".into()));
                }
            }
            Distortion::RandomCut { area_fraction: f } => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(TendError::Parameter(format!(
                        "cut area fraction must be in (0, 1], got {f}"
                    )));
                }
            }
            Distortion::RandomCropResize { side_fraction: f } => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(TendError::Parameter(format!(
                        "crop side fraction must be in (0, 1], got {f}"
                    )));
                }
            }
            Distortion::Noise { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(TendError::Parameter(format!(
                        "noise sigma must be finite and non-negative, got {sigma}"
                    )));
                }
            }
            Distortion::GaussianBlur { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(TendError::Parameter(format!(
                        "blur sigma must be finite and positive, got {sigma}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Forward affine matrix for a rotation (degrees) composed with a horizontal shear.
pub fn affine_matrix(rotation_deg: f64, shear: f64) -> [f64; 6] {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    // R * [[1, shear], [0, 1]]
    [c, c * shear - s, 0.0, s, s * shear + c, 0.0]
}

/// Named distortion, parameters, and the seed that drives any per-pixel randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSpec {
    pub distortion: Distortion,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(distortion: Distortion, seed: u64) -> Self {
        Self { distortion, seed }
    }

    pub fn kind(&self) -> DistortionKind {
        self.distortion.kind()
    }

    pub fn family(&self) -> Family {
        self.kind().family()
    }
}

/// Applies `spec` to `image`. The output keeps the input's shape and metadata except
/// that it is labeled OOD; intensities are clamped to `[0, 1]`.
pub fn distort(image: &ImageSample, spec: &DistortionSpec) -> Result<ImageSample> {
    spec.distortion.validate()?;
    let pixels = match &spec.distortion {
        Distortion::Barrel { a, b, c, d } => warp::barrel(image, *a, *b, *c, *d),
        Distortion::Perspective { offsets } => warp::perspective(image, offsets)?,
        Distortion::Arc { angle_deg } => warp::arc(image, *angle_deg),
        Distortion::Polar => warp::polar(image),
        Distortion::Tile { k } => warp::tile(image, *k),
        Distortion::Affine { matrix } => warp::affine(image, matrix),
        Distortion::RandomCut { area_fraction } => {
            corrupt::random_cut(image, *area_fraction, spec.seed)
        }
        Distortion::RandomCropResize { side_fraction } => {
            corrupt::random_crop_resize(image, *side_fraction, spec.seed)
        }
        Distortion::Noise { sigma } => corrupt::noise(image, *sigma, spec.seed),
        Distortion::GaussianBlur { sigma } => corrupt::gaussian_blur(image, *sigma),
    };
    Ok(image.with_pixels(pixels).with_label(Label::Ood))
}

/// Draws parameters for `kind` from its documented range.
pub fn sample_spec(kind: DistortionKind, seed: u64) -> DistortionSpec {
    let mut r = rng::seeded(seed);
    let distortion = sample_params(kind, &mut r);
    DistortionSpec { distortion, seed }
}

/// Uniform draw over the six training warps, with parameters from their ranges.
pub fn sample_train_spec(seed: u64) -> DistortionSpec {
    let mut r = rng::seeded(seed);
    let kind = DistortionKind::TRAIN[r.random_range(0..DistortionKind::TRAIN.len())];
    let distortion = sample_params(kind, &mut r);
    DistortionSpec { distortion, seed }
}

fn sample_params(kind: DistortionKind, r: &mut rng::Rng) -> Distortion {
    match kind {
        DistortionKind::Barrel => {
            let a = r.random_range(0.0..=0.3);
            let b = r.random_range(0.0..=0.3);
            let c = r.random_range(0.0..=0.3);
            Distortion::Barrel { a, b, c, d: 1.0 - a - b - c }
        }
        DistortionKind::Perspective => {
            let mut offsets = [[0.0; 2]; 4];
            for o in offsets.iter_mut().flatten() {
                *o = r.random_range(-0.25..=0.25);
            }
            Distortion::Perspective { offsets }
        }
        DistortionKind::Arc => Distortion::Arc {
            angle_deg: r.random_range(45.0..=120.0),
        },
        DistortionKind::Polar => Distortion::Polar,
        DistortionKind::Tile => Distortion::Tile {
            k: r.random_range(2..=4),
        },
        DistortionKind::Affine => {
            let rot = r.random_range(-30.0..=30.0);
            let shear = r.random_range(-0.3..=0.3);
            Distortion::Affine {
                matrix: affine_matrix(rot, shear),
            }
        }
        DistortionKind::RandomCut => Distortion::RandomCut {
            area_fraction: r.random_range(0.1..=0.3),
        },
        DistortionKind::RandomCropResize => Distortion::RandomCropResize {
            side_fraction: r.random_range(0.5..=0.8),
        },
        DistortionKind::Noise => Distortion::Noise {
            sigma: r.random_range(0.05..=0.2),
        },
        DistortionKind::GaussianBlur => Distortion::GaussianBlur {
            sigma: r.random_range(2.0..=5.0),
        },
    }
}

/// Applies a validation corruption of `kind` to every ID sample. Each output is labeled
/// OOD with split `VAL_GENERATED`, and its source id is prefixed with `"<kind>:"`.
pub fn generate_validation_set(
    dataset: &[ImageSample],
    kind: DistortionKind,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    if kind.family() != Family::ValSet {
        return Err(TendError::Parameter(format!(
            "`{kind}` is a training distortion, not a validation corruption"
        )));
    }
    let kind_seed = rng::derive(seed, kind as u64);
    dataset
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if img.label != Label::Id {
                return Err(TendError::Data(format!(
                    "validation sets are generated from ID samples; `{}` is {}",
                    img.source_id, img.label
                )));
            }
            let spec = sample_spec(kind, rng::derive(kind_seed, i as u64));
            let out = distort(img, &spec)?;
            Ok(out
                .with_split(Split::ValGenerated)
                .with_source_id(format!("{kind}:{}", img.source_id)))
        })
        .collect()
}
