//! Metrics over relocalised test frames and pose-novelty binning.

use serde::{Deserialize, Serialize};

use super::state::{RelocaliseOptions, RelocaliserState, StageTimings};
use crate::geometry::{pose_error, rotation_angle_between, PoseError, RigidPose};
use crate::io::FrameRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub index: u32,
    pub ground_truth: RigidPose,
    /// `None` when relocalisation failed.
    pub pose: Option<RigidPose>,
    pub error: Option<PoseError>,
    pub success: bool,
    pub timings: Option<StageTimings>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameResult>,
    pub success_rate_5cm5deg: f64,
    /// Metres; infinite when at least half the frames failed.
    pub median_translation: f64,
    /// Degrees.
    pub median_rotation: f64,
    /// Mean over successfully processed frames.
    pub timing: StageTimings,
}

/// Median with the two middle values averaged for even lengths.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b { a } else { 0.5 * (a + b) }
    }
}

impl EvalReport {
    pub fn from_frames(frames: Vec<FrameResult>) -> Self {
        let n = frames.len().max(1) as f64;
        let successes = frames.iter().filter(|f| f.success).count() as f64;
        let t: Vec<f64> = frames.iter().map(|f| f.error.map_or(f64::INFINITY, |e| e.translation_error)).collect();
        let r: Vec<f64> = frames.iter().map(|f| f.error.map_or(f64::INFINITY, |e| e.angular_error)).collect();
        let timings: Vec<StageTimings> = frames.iter().filter_map(|f| f.timings).collect();
        Self {
            success_rate_5cm5deg: successes / n,
            median_translation: median(&t),
            median_rotation: median(&r),
            timing: StageTimings::mean(&timings),
            frames,
        }
    }

    /// Pose errors of every frame, `None` for failures.
    pub fn errors(&self) -> Vec<Option<PoseError>> {
        self.frames.iter().map(|f| f.error).collect()
    }
}

/// Relocalises every test frame; failures count against the success rate.
pub fn evaluate(state: &RelocaliserState, test: &[FrameRecord], options: &RelocaliseOptions) -> EvalReport {
    let frames = test
        .iter()
        .map(|frame| match state.relocalise(frame, options) {
            Ok(r) => {
                let e = pose_error(&r.pose, &frame.pose);
                FrameResult {
                    index: frame.index,
                    ground_truth: frame.pose,
                    pose: Some(r.pose),
                    error: Some(e),
                    success: e.is_success(),
                    timings: Some(r.timings),
                    failure: None,
                }
            }
            Err(e) => FrameResult {
                index: frame.index,
                ground_truth: frame.pose,
                pose: None,
                error: None,
                success: false,
                timings: None,
                failure: Some(e.to_string()),
            },
        })
        .collect();
    EvalReport::from_frames(frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyBin {
    /// Upper limits `(cm, degrees)`; `None` for the final open bin.
    pub limit: Option<(f64, f64)>,
    pub count: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyBinning {
    pub bins: Vec<NoveltyBin>,
    /// Bin of each test pose.
    pub assignment: Vec<usize>,
}

pub const DEFAULT_NOVELTY_EDGES: [(f64, f64); 5] = [(10.0, 10.0), (20.0, 20.0), (30.0, 30.0), (40.0, 40.0), (50.0, 50.0)];

/// Distance (cm) to the nearest training position and angle (degrees) to
/// the nearest training orientation, minimised independently.
pub fn pose_novelty(train: &[RigidPose], test: &RigidPose) -> (f64, f64) {
    let mut t = f64::INFINITY;
    let mut r = f64::INFINITY;
    for p in train {
        t = t.min((p.translation - test.translation).norm() * 100.0);
        r = r.min(rotation_angle_between(&p.rotation, &test.rotation).to_degrees());
    }
    (t, r)
}

/// Puts each test pose into the first bin whose translation and rotation
/// limits it both meets, or into the final open bin.
pub fn novelty_binning(train: &[RigidPose], test: &[RigidPose], successes: &[bool], edges: &[(f64, f64)]) -> NoveltyBinning {
    assert_eq!(test.len(), successes.len(), "one outcome per test pose");
    let mut bins: Vec<NoveltyBin> = edges
        .iter()
        .map(|&e| Some(e))
        .chain(std::iter::once(None))
        .map(|limit| NoveltyBin {
            limit,
            count: 0,
            successes: 0,
            success_rate: 0.0,
        })
        .collect();
    let mut assignment = Vec::with_capacity(test.len());
    for (pose, &ok) in test.iter().zip(successes) {
        let (t, r) = pose_novelty(train, pose);
        let b = edges.iter().position(|&(et, er)| t <= et && r <= er).unwrap_or(edges.len());
        bins[b].count += 1;
        bins[b].successes += ok as usize;
        assignment.push(b);
    }
    for b in &mut bins {
        b.success_rate = if b.count == 0 { 0.0 } else { b.successes as f64 / b.count as f64 };
    }
    NoveltyBinning { bins, assignment }
}
