//! Sources of per-frame scene coordinate predictions.
//!
//! Predictions either come from files written by an offline-trained network,
//! or from [`predict_synthetic`], an oracle that warps the ground-truth world
//! coordinates of a frame so that the adaptation layer can be exercised
//! without a trained network.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Aabb;
use crate::io::{self, FrameRecord, IoError};

/// Subsampling stride between the input image and the prediction grid.
pub const GRID_STRIDE: usize = 8;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("no prediction stored for frame {0}")]
    MissingPrediction(u32),
    #[error("invalid synthetic predictor config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `w/8 × h/8` field of predicted pre-training-scene points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub width: usize,
    pub height: usize,
    points: Vec<[f32; 3]>,
    valid: Vec<bool>,
}

impl PredictionGrid {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            points: vec![[0.0; 3]; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Empty grid sized for a `width × height` input image.
    pub fn for_image(width: usize, height: usize) -> Self {
        Self::invalid(width / GRID_STRIDE, height / GRID_STRIDE)
    }

    pub fn from_parts(width: usize, height: usize, points: Vec<[f32; 3]>, valid: Vec<bool>) -> Self {
        assert_eq!(points.len(), width * height);
        assert_eq!(valid.len(), width * height);
        Self {
            width,
            height,
            points,
            valid,
        }
    }

    /// Image pixel that cell `(x, y)` was predicted for.
    pub fn source_pixel(x: usize, y: usize) -> [usize; 2] {
        [GRID_STRIDE * x, GRID_STRIDE * y]
    }

    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let i = y * self.width + x;
        self.valid[i].then(|| {
            let p = self.points[i];
            Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
        })
    }

    pub fn set(&mut self, x: usize, y: usize, p: Option<[f32; 3]>) {
        let i = y * self.width + x;
        match p {
            Some(p) => {
                self.points[i] = p;
                self.valid[i] = true;
            }
            None => self.valid[i] = false,
        }
    }

    pub fn raw_points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Consistent, spatially smooth regression error applied to a fraction of the
/// scene: a surface patch is either always affected or never, so the error
/// behaves like a network that confuses particular scene regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystematicError {
    /// Probability that a patch is affected.
    pub fraction: f64,
    /// Side length of the world-space patches, metres.
    pub patch_size: f64,
    /// Common displacement of affected points, metres.
    pub offset: Vector3<f64>,
    /// Amplitude of the sinusoidal wobble added to `offset`, metres.
    pub wobble_amplitude: f64,
    /// Wavelength of the wobble, metres.
    pub wobble_wavelength: f64,
}

impl SystematicError {
    fn displacement(&self, gt: &Vector3<f64>, seed: u64) -> Option<Vector3<f64>> {
        let key = [
            (gt.x / self.patch_size).floor() as i64,
            (gt.y / self.patch_size).floor() as i64,
            (gt.z / self.patch_size).floor() as i64,
        ];
        if unit_hash(seed, key) >= self.fraction {
            return None;
        }
        let k = std::f64::consts::TAU / self.wobble_wavelength;
        let wobble = Vector3::new((k * gt.y).sin(), (k * gt.z).sin(), (k * gt.x).sin());
        Some(self.offset + wobble * self.wobble_amplitude)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic value in `[0, 1)` for an integer key.
fn unit_hash(seed: u64, key: [i64; 3]) -> f64 {
    let mut h = splitmix(seed);
    for k in key {
        h = splitmix(h ^ k as u64);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPredictorConfig {
    /// Linear part of the affine warp into the pre-training scene.
    pub warp: Matrix3<f64>,
    pub warp_offset: Vector3<f64>,
    /// Isotropic Gaussian noise, metres.
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Region that outliers are drawn uniformly from.
    pub outlier_box: Aabb,
    pub seed: u64,
    #[serde(default)]
    pub systematic: Option<SystematicError>,
}

impl SyntheticPredictorConfig {
    pub fn identity(outlier_box: Aabb, seed: u64) -> Self {
        Self {
            warp: Matrix3::identity(),
            warp_offset: Vector3::zeros(),
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_box,
            seed,
            systematic: None,
        }
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.warp.determinant().abs() <= 1e-6 {
            return Err(PredictorError::InvalidConfig("warp is not invertible".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(PredictorError::InvalidConfig(format!(
                "outlier fraction {} outside [0, 1]",
                self.outlier_fraction
            )));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(PredictorError::InvalidConfig("negative noise sigma".into()));
        }
        if let Some(s) = &self.systematic {
            if !(0.0..=1.0).contains(&s.fraction) || s.patch_size <= 0.0 || s.wobble_wavelength <= 0.0 {
                return Err(PredictorError::InvalidConfig("bad systematic error".into()));
            }
        }
        Ok(())
    }

    pub fn apply_warp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.warp * p + self.warp_offset
    }

    /// Spectral norm of the warp.
    pub fn lipschitz_bound(&self) -> f64 {
        self.warp.singular_values().max()
    }
}

/// Predicts by warping the frame's ground-truth world coordinates.
///
/// The RNG stream depends only on `(seed, frame.index)`, so the output does not
/// depend on the order in which frames are processed.
pub fn predict_synthetic(frame: &FrameRecord, config: &SyntheticPredictorConfig) -> PredictionGrid {
    let mut grid = PredictionGrid::for_image(frame.depth.width, frame.depth.height);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(frame.index as u64);
    let lo = config.outlier_box.min;
    let ext = config.outlier_box.extent();
    for y in 0..grid.height {
        for x in 0..grid.width {
            let [u, v] = PredictionGrid::source_pixel(x, y);
            let Some(d) = frame.depth.get(u, v) else {
                continue;
            };
            let gt = frame
                .pose
                .transform_point(&frame.intrinsics.unproject(u as f64, v as f64, d as f64));
            let p = if rng.random::<f64>() < config.outlier_fraction {
                Vector3::new(
                    lo.x + ext.x * rng.random::<f64>(),
                    lo.y + ext.y * rng.random::<f64>(),
                    lo.z + ext.z * rng.random::<f64>(),
                )
            } else {
                let shifted = match &config.systematic {
                    Some(s) => gt + s.displacement(&gt, config.seed).unwrap_or_else(Vector3::zeros),
                    None => gt,
                };
                let n: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                config.apply_warp(&shifted) + n * config.noise_sigma
            };
            grid.set(x, y, Some([p.x as f32, p.y as f32, p.z as f32]));
        }
    }
    grid
}

/// Directory of prediction files, one per frame (`frame-NNNNNN.pred`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionStore {
    pub dir: PathBuf,
}

impl PredictionStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, frame_index: u32) -> PathBuf {
        self.dir.join(format!("frame-{frame_index:06}.pred"))
    }

    pub fn write(&self, frame_index: u32, grid: &PredictionGrid) -> Result<(), IoError> {
        std::fs::create_dir_all(&self.dir)?;
        io::save_predictions(
            &io::PredictionFile {
                frame_index,
                grid: grid.clone(),
            },
            &self.path_for(frame_index),
        )
    }
}

pub fn predict_from_file(frame_index: u32, store: &PredictionStore) -> Result<PredictionGrid, PredictorError> {
    let path = store.path_for(frame_index);
    if !Path::new(&path).exists() {
        return Err(PredictorError::MissingPrediction(frame_index));
    }
    Ok(io::load_predictions(&path)?.grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predictor {
    Synthetic(SyntheticPredictorConfig),
    Files(PredictionStore),
}

impl Predictor {
    pub fn predict(&self, frame: &FrameRecord) -> Result<PredictionGrid, PredictorError> {
        match self {
            Predictor::Synthetic(cfg) => Ok(predict_synthetic(frame, cfg)),
            Predictor::Files(store) => predict_from_file(frame.index, store),
        }
    }
}
