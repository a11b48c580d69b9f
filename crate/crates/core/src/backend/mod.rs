//! Pose estimation from scene-coordinate correspondences: hypothesis
//! generation, culling and pre-emptive RANSAC with LM refinement.

mod kabsch;
mod lm;

use std::time::{Duration, Instant};

use image::RgbImage;
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kabsch::kabsch;
pub use lm::{apply_twist, lm_objective, lm_refine, LmStatus};

use crate::geometry::{CameraIntrinsics, DepthImage, RigidPose};
use crate::grid::ReservoirIndexImage;
use crate::predictor::PredictionGrid;
use crate::reservoir::{ClusterSummary, Reservoir};

/// Per-channel colour tolerance of the generation check, RGB in `[0, 1]`.
pub const COLOUR_TOLERANCE: f64 = 0.3;
/// Allowed difference between camera- and world-space pairwise distances, m.
pub const RIGIDITY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("no hypotheses after {attempts} generation attempts")]
    NoHypotheses { attempts: usize },
    #[error("invalid RANSAC parameters: {0}")]
    InvalidParams(String),
}

/// A live pixel and the candidate world points (modes) predicted for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub pixel: [usize; 2],
    /// `D(u)·K⁻¹·u̇`.
    pub camera_point: Vector3<f64>,
    /// Live pixel colour; `None` skips the colour check.
    pub colour: Option<Vector3<f64>>,
    pub modes: Vec<ClusterSummary>,
}

impl Correspondence {
    pub fn new(pixel: [usize; 2], camera_point: Vector3<f64>, colour: Option<Vector3<f64>>, modes: Vec<ClusterSummary>) -> Self {
        Self {
            pixel,
            camera_point,
            colour,
            modes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseHypothesis {
    pub pose: RigidPose,
    /// Lower is better.
    pub energy: f64,
    /// `(correspondence index, mode index)` pairs.
    pub inliers: Vec<(usize, usize)>,
}

impl PoseHypothesis {
    pub fn new(pose: RigidPose) -> Self {
        Self {
            pose,
            energy: 0.0,
            inliers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub max_pose_candidates: usize,
    pub max_after_cull: usize,
    pub inliers_per_iteration: usize,
    pub max_candidate_generation_iterations: usize,
    /// m²
    pub min_squared_distance_between_sampled_modes: f64,
    /// Residuals are truncated at twice this, metres.
    pub max_translation_error_for_correct_pose: f64,
    pub pose_update: bool,
    pub use_prediction_covariance: bool,
    pub final_count: usize,
}

impl RansacParams {
    pub fn indoor() -> Self {
        Self {
            max_pose_candidates: 1024,
            max_after_cull: 64,
            inliers_per_iteration: 512,
            max_candidate_generation_iterations: 6000,
            min_squared_distance_between_sampled_modes: 0.09,
            max_translation_error_for_correct_pose: 0.05,
            pose_update: true,
            use_prediction_covariance: true,
            final_count: 16,
        }
    }

    pub fn outdoor() -> Self {
        Self {
            max_pose_candidates: 2048,
            min_squared_distance_between_sampled_modes: 0.0225,
            max_translation_error_for_correct_pose: 0.1,
            use_prediction_covariance: false,
            ..Self::indoor()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let counts = [
            self.max_pose_candidates,
            self.max_after_cull,
            self.inliers_per_iteration,
            self.max_candidate_generation_iterations,
            self.final_count,
        ];
        if counts.contains(&0) {
            return Err(BackendError::InvalidParams("counts must be at least 1".into()));
        }
        if !(self.final_count <= self.max_after_cull && self.max_after_cull <= self.max_pose_candidates) {
            return Err(BackendError::InvalidParams(
                "need final_count <= max_after_cull <= max_pose_candidates".into(),
            ));
        }
        if !(self.max_translation_error_for_correct_pose > 0.0 && self.min_squared_distance_between_sampled_modes >= 0.0) {
            return Err(BackendError::InvalidParams("distances must be positive".into()));
        }
        Ok(())
    }

    /// Residual truncation threshold of the energy, metres.
    pub fn truncation(&self) -> f64 {
        2.0 * self.max_translation_error_for_correct_pose
    }
}

fn pixel_colour(rgb: &RgbImage, [x, y]: [usize; 2]) -> Vector3<f64> {
    let p = rgb.get_pixel(x as u32, y as u32).0;
    Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
}

/// One correspondence per index-image cell with a clustered reservoir and
/// valid depth at its source pixel.
pub fn build_correspondences(
    index_image: &ReservoirIndexImage,
    depth: &DepthImage,
    rgb: Option<&RgbImage>,
    k: &CameraIntrinsics,
    reservoirs: &[Reservoir],
) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for ([x, y], r) in index_image.iter() {
        let [u, v] = PredictionGrid::source_pixel(x, y);
        let Some(d) = depth.get(u, v) else {
            continue;
        };
        let Some(res) = reservoirs.get(r as usize) else {
            continue;
        };
        if res.modes().is_empty() {
            continue;
        }
        out.push(Correspondence::new(
            [u, v],
            k.unproject(u as f64, v as f64, d as f64),
            rgb.map(|img| pixel_colour(img, [u, v])),
            res.modes().to_vec(),
        ));
    }
    out
}

/// Treats each raw prediction as the single mode of its pixel, bypassing the
/// adaptation layer.
pub fn raw_correspondences(pred: &PredictionGrid, depth: &DepthImage, k: &CameraIntrinsics) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for y in 0..pred.height {
        for x in 0..pred.width {
            let [u, v] = PredictionGrid::source_pixel(x, y);
            let (Some(p), Some(d)) = (pred.get(x, y), depth.get(u, v)) else {
                continue;
            };
            out.push(Correspondence::new(
                [u, v],
                k.unproject(u as f64, v as f64, d as f64),
                None,
                vec![point_mode(p)],
            ));
        }
    }
    out
}

/// Mode summary of a single point with unit covariance.
pub fn point_mode(p: Vector3<f64>) -> ClusterSummary {
    ClusterSummary {
        centroid: p,
        colour_centroid: Vector3::zeros(),
        covariance: Matrix3::identity(),
        information: Matrix3::identity(),
        size: 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub hypotheses: Vec<PoseHypothesis>,
    pub attempts: usize,
}

fn passes_colour(c: &Correspondence, m: &ClusterSummary) -> bool {
    match &c.colour {
        Some(col) => (col - m.colour_centroid).amax() <= COLOUR_TOLERANCE,
        None => true,
    }
}

/// Samples triples of (pixel, mode) pairs, keeping the Kabsch poses of those
/// that pass the colour, mode-separation and rigidity checks.
pub fn generate_hypotheses<R: Rng + ?Sized>(
    cs: &[Correspondence],
    params: &RansacParams,
    rng: &mut R,
) -> Result<Generated, BackendError> {
    if cs.len() < 3 {
        return Err(BackendError::NoHypotheses { attempts: 0 });
    }
    let mut hypotheses = Vec::new();
    let mut attempts = 0;
    while hypotheses.len() < params.max_pose_candidates && attempts < params.max_candidate_generation_iterations {
        attempts += 1;
        let mut picks = [(0usize, 0usize); 3];
        let mut ok = true;
        for i in 0..3 {
            let ci = loop {
                let ci = rng.random_range(0..cs.len());
                if picks[..i].iter().all(|p| p.0 != ci) {
                    break ci;
                }
            };
            let mi = rng.random_range(0..cs[ci].modes.len());
            if !passes_colour(&cs[ci], &cs[ci].modes[mi]) {
                ok = false;
                break;
            }
            picks[i] = (ci, mi);
        }
        if !ok {
            continue;
        }
        let cam = picks.map(|(ci, _)| cs[ci].camera_point);
        let world = picks.map(|(ci, mi)| cs[ci].modes[mi].centroid);
        let pairs = [(0, 1), (0, 2), (1, 2)];
        if pairs
            .iter()
            .any(|&(a, b)| (world[a] - world[b]).norm_squared() < params.min_squared_distance_between_sampled_modes)
        {
            continue;
        }
        if pairs
            .iter()
            .any(|&(a, b)| ((cam[a] - cam[b]).norm() - (world[a] - world[b]).norm()).abs() > RIGIDITY_TOLERANCE)
        {
            continue;
        }
        if let Ok(pose) = kabsch(&cam, &world) {
            hypotheses.push(PoseHypothesis {
                pose,
                energy: 0.0,
                inliers: picks.to_vec(),
            });
        }
    }
    if hypotheses.is_empty() {
        return Err(BackendError::NoHypotheses { attempts });
    }
    Ok(Generated { hypotheses, attempts })
}

/// Truncated Euclidean distance from `H·x` to the nearest mode, and that mode.
pub fn correspondence_residual(pose: &RigidPose, c: &Correspondence, truncation: f64) -> (f64, usize) {
    let x = pose.transform_point(&c.camera_point);
    let mut best = (f64::INFINITY, 0);
    for (i, m) in c.modes.iter().enumerate() {
        let d = (x - m.centroid).norm();
        if d < best.0 {
            best = (d, i);
        }
    }
    (best.0.min(truncation), best.1)
}

/// Mean truncated residual over the sampled correspondences.
pub fn energy(pose: &RigidPose, cs: &[Correspondence], sample: &[usize], truncation: f64) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    sample
        .iter()
        .map(|&i| correspondence_residual(pose, &cs[i], truncation).0)
        .sum::<f64>()
        / sample.len() as f64
}

/// Up to `n` distinct correspondence indices, uniformly at random.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, len, n.min(len)).into_vec()
}

fn sort_by_energy(hs: &mut [PoseHypothesis]) {
    hs.sort_by(|a, b| a.energy.total_cmp(&b.energy));
}

/// Scores every hypothesis on one shared sample of `η` correspondences and
/// keeps the best `N_cull`.
pub fn score_and_cull<R: Rng + ?Sized>(
    mut hs: Vec<PoseHypothesis>,
    cs: &[Correspondence],
    params: &RansacParams,
    rng: &mut R,
) -> Vec<PoseHypothesis> {
    let sample = sample_indices(cs.len(), params.inliers_per_iteration, rng);
    for h in &mut hs {
        h.energy = energy(&h.pose, cs, &sample, params.truncation());
    }
    sort_by_energy(&mut hs);
    hs.truncate(params.max_after_cull);
    hs
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreemptiveOutcome {
    /// Exactly `final_count` hypotheses, best first.
    pub hypotheses: Vec<PoseHypothesis>,
    pub rounds: usize,
    pub lm_time: Duration,
}

/// Halves the candidate set each round on a growing set of sampled
/// correspondences, LM-refining survivors on their inliers when
/// `pose_update` is set. At least one round runs.
pub fn preemptive_ransac<R: Rng + ?Sized>(
    mut hs: Vec<PoseHypothesis>,
    cs: &[Correspondence],
    params: &RansacParams,
    rng: &mut R,
) -> PreemptiveOutcome {
    assert!(!hs.is_empty(), "preemptive RANSAC needs hypotheses");
    let tau = params.truncation();
    let mut order: Vec<usize> = (0..cs.len()).collect();
    order.shuffle(rng);
    let mut taken = 0;
    let mut rounds = 0;
    let mut lm_time = Duration::ZERO;
    loop {
        let end = (taken + params.inliers_per_iteration).min(order.len());
        taken = end;
        let sample = &order[..taken];
        rounds += 1;
        for h in hs.iter_mut() {
            if params.pose_update {
                let inliers: Vec<(usize, usize)> = sample
                    .iter()
                    .filter_map(|&i| {
                        let (r, m) = correspondence_residual(&h.pose, &cs[i], tau);
                        (r < tau).then_some((i, m))
                    })
                    .collect();
                if inliers.len() >= 3 {
                    let t = Instant::now();
                    let (refined, _) = lm_refine(h, cs, &inliers, params.use_prediction_covariance);
                    lm_time += t.elapsed();
                    h.pose = refined.pose;
                    h.inliers = inliers;
                }
            }
            h.energy = energy(&h.pose, cs, sample, tau);
        }
        sort_by_energy(&mut hs);
        if hs.len() <= params.final_count {
            break;
        }
        hs.truncate(params.final_count.max(hs.len() / 2));
        if hs.len() <= params.final_count {
            break;
        }
    }
    let n = hs.len();
    for i in 0..params.final_count.saturating_sub(n) {
        hs.push(hs[i % n].clone());
    }
    PreemptiveOutcome {
        hypotheses: hs,
        rounds,
        lm_time,
    }
}
