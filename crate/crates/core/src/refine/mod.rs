//! ICP refinement against the scene model and depth-render hypothesis ranking.

mod model;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{ScenePointModel, VoxelAccumulator};

use crate::backend::kabsch;
use crate::geometry::{CameraIntrinsics, DepthImage, RigidPose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("no live point has a model neighbour within the rejection distance")]
    EmptyOverlap,
    #[error("every ranking candidate failed to overlap the model")]
    AllFailed,
    #[error("scene model is empty")]
    EmptyModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    /// Live depth subsampling stride, pixels.
    pub icp_stride: usize,
    /// Pairs farther apart are rejected, metres.
    pub icp_rejection: f64,
    pub icp_max_iterations: usize,
    /// Stop when the residual changes by less than this fraction.
    pub icp_min_relative_change: f64,
    /// Mean residual below which ICP counts as converged, metres.
    pub icp_converged_residual: f64,
    pub splat_radius: usize,
    /// Per-pixel truncation of the depth comparison, metres.
    pub depth_truncation: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            icp_stride: 8,
            icp_rejection: 0.1,
            icp_max_iterations: 20,
            icp_min_relative_change: 1e-4,
            icp_converged_residual: 0.02,
            splat_radius: 1,
            depth_truncation: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub pose: RigidPose,
    pub converged: bool,
    /// Mean truncated nearest-neighbour distance at `pose`, metres.
    pub residual: f64,
    pub iterations: usize,
}

fn live_points(depth: &DepthImage, k: &CameraIntrinsics, stride: usize) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for v in (0..depth.height).step_by(stride) {
        for u in (0..depth.width).step_by(stride) {
            if let Some(d) = depth.get(u, v) {
                pts.push(k.unproject(u as f64, v as f64, d as f64));
            }
        }
    }
    pts
}

/// Point-to-point ICP of the subsampled live depth against the model. The
/// returned pose is the best visited one, so the residual never increases.
pub fn icp_refine(
    initial: &RigidPose,
    live_depth: &DepthImage,
    k: &CameraIntrinsics,
    model: &ScenePointModel,
    params: &RefineParams,
) -> Result<IcpResult, RefineError> {
    if model.is_empty() {
        return Err(RefineError::EmptyModel);
    }
    let source = live_points(live_depth, k, params.icp_stride);
    let reject = params.icp_rejection;
    let mut pose = *initial;
    let mut best: Option<(RigidPose, f64)> = None;
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..=params.icp_max_iterations {
        let mut cam = Vec::new();
        let mut world = Vec::new();
        let mut total = 0.0;
        for p in &source {
            let (i, d) = model.nearest(&pose.transform_point(p)).expect("model is non-empty");
            total += d.min(reject);
            if d < reject {
                cam.push(*p);
                world.push(model.position(i));
            }
        }
        if it == 0 && cam.len() < 3 {
            return Err(RefineError::EmptyOverlap);
        }
        let residual = total / source.len().max(1) as f64;
        if best.is_none_or(|(_, r)| residual < r) {
            best = Some((pose, residual));
        }
        let change = (prev - residual).abs() / prev.max(f64::MIN_POSITIVE);
        if it == params.icp_max_iterations || cam.len() < 3 || change < params.icp_min_relative_change || residual == 0.0 {
            break;
        }
        prev = residual;
        match kabsch(&cam, &world) {
            Ok(next) => pose = next,
            Err(_) => break,
        }
        iterations += 1;
    }
    let (pose, residual) = best.expect("at least one iteration ran");
    Ok(IcpResult {
        pose,
        converged: residual < params.icp_converged_residual,
        residual,
        iterations,
    })
}

/// Z-buffer splat of the model: per-pixel camera depth and index of the
/// nearest point.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub depth: DepthImage,
    pub winner: Vec<Option<u32>>,
}

pub fn splat(model: &ScenePointModel, pose: &RigidPose, k: &CameraIntrinsics, radius: usize) -> Splat {
    let (w, h) = (k.width, k.height);
    let mut zbuf = vec![f32::INFINITY; w * h];
    let mut winner = vec![None; w * h];
    let inv = pose.inverse();
    let r = radius as i64;
    for (i, p) in model.positions().iter().enumerate() {
        let c = inv.transform_point(&Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64));
        if c.z <= 0.0 {
            continue;
        }
        let u = (k.fx * c.x / c.z + k.cx).round();
        let v = (k.fy * c.y / c.z + k.cy).round();
        if !(u > -(r as f64) - 1.0 && v > -(r as f64) - 1.0 && u < (w as i64 + r) as f64 && v < (h as i64 + r) as f64) {
            continue;
        }
        let (u, v) = (u as i64, v as i64);
        let z = c.z as f32;
        for y in (v - r).max(0)..=(v + r).min(h as i64 - 1) {
            for x in (u - r).max(0)..=(u + r).min(w as i64 - 1) {
                let j = y as usize * w + x as usize;
                if z < zbuf[j] {
                    zbuf[j] = z;
                    winner[j] = Some(i as u32);
                }
            }
        }
    }
    for z in &mut zbuf {
        if !z.is_finite() {
            *z = 0.0;
        }
    }
    Splat {
        depth: DepthImage::from_values(w, h, zbuf),
        winner,
    }
}

pub fn render_depth(model: &ScenePointModel, pose: &RigidPose, k: &CameraIntrinsics, radius: usize) -> DepthImage {
    splat(model, pose, k, radius).depth
}

/// Mean of `min(|a − b|, truncation)` over pixels valid in both images;
/// infinite without overlap.
pub fn depth_score(rendered: &DepthImage, live: &DepthImage, truncation: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&a, &b) in rendered.values().iter().zip(live.values()) {
        if a > 0.0 && b > 0.0 {
            sum += ((a - b).abs() as f64).min(truncation);
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub pose: RigidPose,
    pub depth_score: f64,
    pub icp_converged: bool,
    /// Position of the winner in the candidate list.
    pub candidate: usize,
}

/// ICP-refines every distinct candidate and keeps the one whose rendered
/// depth best matches the live depth; ties go to the earlier candidate.
pub fn rank_hypotheses(
    candidates: &[RigidPose],
    live_depth: &DepthImage,
    k: &CameraIntrinsics,
    model: &ScenePointModel,
    params: &RefineParams,
) -> Result<RankedResult, RefineError> {
    assert!(!candidates.is_empty(), "ranking needs candidates");
    let mut best: Option<RankedResult> = None;
    for (i, c) in candidates.iter().enumerate() {
        if candidates[..i].contains(c) {
            continue;
        }
        let icp = match icp_refine(c, live_depth, k, model, params) {
            Ok(r) => r,
            Err(RefineError::EmptyOverlap) => continue,
            Err(e) => return Err(e),
        };
        let rendered = render_depth(model, &icp.pose, k, params.splat_radius);
        let score = depth_score(&rendered, live_depth, params.depth_truncation);
        if best.is_none_or(|b| score < b.depth_score) {
            best = Some(RankedResult {
                pose: icp.pose,
                depth_score: score,
                icp_converged: icp.converged,
                candidate: i,
            });
        }
    }
    best.ok_or(RefineError::AllFailed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, pose_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 200.0, 160.0, 120.0, 320, 240).unwrap()
    }

    /// Room corner: floor and two walls sampled every 1 cm.
    fn corner_model() -> ScenePointModel {
        let mut pos = Vec::new();
        let n = 200;
        for a in 0..n {
            for b in 0..n {
                let (s, t) = (a as f32 * 0.01, b as f32 * 0.01);
                pos.push([s, t, 0.0]);
                pos.push([s, 0.0, t]);
                pos.push([0.0, s, t]);
            }
        }
        let colours = vec![[128; 3]; pos.len()];
        ScenePointModel::new(pos, colours)
    }

    fn gt_pose() -> RigidPose {
        look_at(Vector3::new(1.6, 1.5, 1.2), Vector3::new(0.3, 0.3, 0.4), Vector3::z())
    }

    /// Live points back-projected at ground truth, so NN distances vanish there.
    fn exact_model(live: &DepthImage, stride: usize) -> ScenePointModel {
        let pts: Vec<[f32; 3]> = live_points(live, &k(), stride)
            .iter()
            .map(|p| {
                let w = gt_pose().transform_point(p);
                [w.x as f32, w.y as f32, w.z as f32]
            })
            .collect();
        let n = pts.len();
        ScenePointModel::new(pts, vec![[0; 3]; n])
    }

    #[test]
    fn empty_model_renders_nothing() {
        let d = render_depth(&ScenePointModel::default(), &RigidPose::identity(), &k(), 1);
        assert_eq!(d.valid_count(), 0);
    }

    #[test]
    fn single_point_render() {
        let m = ScenePointModel::new(vec![[0.0, 0.0, 2.0]], vec![[0; 3]]);
        let d = render_depth(&m, &RigidPose::identity(), &k(), 0);
        assert_eq!(d.get(160, 120), Some(2.0));
        assert_eq!(d.valid_count(), 1);
        assert_eq!(render_depth(&m, &RigidPose::identity(), &k(), 1).valid_count(), 9);
    }

    #[test]
    fn render_depth_is_camera_z_of_winner() {
        let m = corner_model();
        let pose = gt_pose();
        let s = splat(&m, &pose, &k(), 1);
        let inv = pose.inverse();
        for (j, w) in s.winner.iter().enumerate() {
            if let Some(i) = w {
                let z = inv.transform_point(&m.position(*i as usize)).z;
                assert!((s.depth.values()[j] as f64 - z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn icp_fixed_point_at_ground_truth() {
        let m = corner_model();
        let live = render_depth(&m, &gt_pose(), &k(), 0);
        let exact = exact_model(&live, 8);
        let r = icp_refine(&gt_pose(), &live, &k(), &exact, &RefineParams::default()).unwrap();
        assert!(r.converged);
        assert!((r.pose.translation - gt_pose().translation).norm() < 1e-6);
        assert!((r.pose.rotation - gt_pose().rotation).norm() < 1e-6);
    }

    #[test]
    fn icp_recovers_small_perturbation() {
        let live = render_depth(&corner_model(), &gt_pose(), &k(), 0);
        let m = exact_model(&live, 1);
        let perturb = RigidPose::from_axis_angle(Vector3::new(1.0, 1.0, 0.0).normalize() * 3f64.to_radians(), Vector3::new(0.03, 0.0, 0.0));
        let r = icp_refine(&perturb.compose(&gt_pose()), &live, &k(), &m, &RefineParams::default()).unwrap();
        let e = pose_error(&r.pose, &gt_pose());
        assert!(e.translation_error < 1e-3 && e.angular_error < 0.1, "{e:?}");
        assert!(r.converged);
    }

    #[test]
    fn icp_far_start_does_not_converge() {
        let m = corner_model();
        let live = render_depth(&m, &gt_pose(), &k(), 0);
        let start = RigidPose {
            translation: gt_pose().translation + Vector3::new(1.0, 0.0, 0.0),
            ..gt_pose()
        };
        match icp_refine(&start, &live, &k(), &m, &RefineParams::default()) {
            Ok(r) => assert!(!r.converged),
            Err(e) => assert_eq!(e, RefineError::EmptyOverlap),
        }
    }

    #[test]
    fn icp_without_overlap() {
        let m = corner_model();
        let live = render_depth(&m, &gt_pose(), &k(), 0);
        let far = RigidPose {
            translation: Vector3::new(100.0, 0.0, 0.0),
            ..gt_pose()
        };
        assert_eq!(icp_refine(&far, &live, &k(), &m, &RefineParams::default()), Err(RefineError::EmptyOverlap));
        assert_eq!(
            rank_hypotheses(&[far], &live, &k(), &m, &RefineParams::default()),
            Err(RefineError::AllFailed)
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn icp_never_worsens_residual(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = corner_model();
            let live = render_depth(&m, &gt_pose(), &k(), 0);
            let aa = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let t = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let start = RigidPose::from_axis_angle(aa, t).compose(&gt_pose());
            let params = RefineParams { icp_max_iterations: 0, ..RefineParams::default() };
            if let Ok(r0) = icp_refine(&start, &live, &k(), &m, &params) {
                let r = icp_refine(&start, &live, &k(), &m, &RefineParams::default()).unwrap();
                proptest::prop_assert!(r.residual <= r0.residual);
            }
        }
    }

    #[test]
    fn depth_score_rules() {
        let a = DepthImage::from_values(2, 1, vec![1.0, 0.0]);
        let b = DepthImage::from_values(2, 1, vec![1.5, 2.0]);
        assert!((depth_score(&a, &b, 0.2) - 0.2).abs() < 1e-12);
        assert_eq!(depth_score(&a, &DepthImage::invalid(2, 1), 0.2), f64::INFINITY);
    }

    fn ranking_slate(rng: &mut ChaCha8Rng) -> Vec<RigidPose> {
        let mut c: Vec<RigidPose> = (0..15)
            .map(|_| {
                let aa = Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6));
                let t = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
                RigidPose::from_axis_angle(aa, t).compose(&gt_pose())
            })
            .collect();
        c.insert(7, gt_pose());
        c
    }

    #[test]
    fn planted_ground_truth_wins_and_order_is_irrelevant() {
        let live = render_depth(&corner_model(), &gt_pose(), &k(), 1);
        let m = exact_model(&live, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = ranking_slate(&mut rng);
        let r = rank_hypotheses(&c, &live, &k(), &m, &RefineParams::default()).unwrap();
        assert!(pose_error(&r.pose, &gt_pose()).within(1e-3, 0.1));
        c.reverse();
        let r2 = rank_hypotheses(&c, &live, &k(), &m, &RefineParams::default()).unwrap();
        assert_eq!(r.pose, r2.pose);
        let single = rank_hypotheses(&[gt_pose()], &live, &k(), &m, &RefineParams::default()).unwrap();
        assert_eq!(single.candidate, 0);
    }
}
