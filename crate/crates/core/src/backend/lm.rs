//! Levenberg-Marquardt pose refinement over hypothesis inliers.

use nalgebra::{Cholesky, Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{Correspondence, PoseHypothesis};
use crate::geometry::RigidPose;

/// Huber threshold for Euclidean residuals, metres.
pub const HUBER_EUCLIDEAN: f64 = 0.05;
/// Huber threshold for whitened (Mahalanobis) residuals.
pub const HUBER_WHITENED: f64 = 3.0;
pub const MAX_ITERATIONS: usize = 20;
pub const MIN_STEP: f64 = 1e-6;
const INITIAL_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmStatus {
    Converged,
    MaxIterations,
    /// Normal equations could not be solved; the input pose is returned.
    SingularNormalEquations,
}

struct Term {
    camera: Vector3<f64>,
    target: Vector3<f64>,
    /// Whitening transform `Lᵀ` with `LLᵀ` the information matrix.
    whiten: Option<Matrix3<f64>>,
}

fn huber(s: f64, k: f64) -> f64 {
    if s <= k {
        0.5 * s * s
    } else {
        k * (s - 0.5 * k)
    }
}

fn residual(term: &Term, pose: &RigidPose) -> Vector3<f64> {
    let r = pose.transform_point(&term.camera) - term.target;
    match &term.whiten {
        Some(w) => w * r,
        None => r,
    }
}

fn objective(terms: &[Term], pose: &RigidPose, k: f64) -> f64 {
    terms.iter().map(|t| huber(residual(t, pose).norm(), k)).sum()
}

/// Applies the left-multiplied twist `(ω, v)`.
pub fn apply_twist(pose: &RigidPose, delta: &Vector6<f64>) -> RigidPose {
    let omega = delta.fixed_rows::<3>(0).into_owned();
    let v = delta.fixed_rows::<3>(3).into_owned();
    let exp = Rotation3::new(omega).into_inner();
    RigidPose {
        rotation: exp * pose.rotation,
        translation: exp * pose.translation + v,
    }
}

/// Minimises Σ huber(‖r_i‖) with `r_i = H·x_i − m_i`, whitened by the mode's
/// information matrix when `use_covariance` is set. Steps are only accepted
/// when they lower the objective.
pub fn lm_refine(
    h: &PoseHypothesis,
    cs: &[Correspondence],
    inliers: &[(usize, usize)],
    use_covariance: bool,
) -> (PoseHypothesis, LmStatus) {
    let terms: Vec<Term> = inliers
        .iter()
        .map(|&(ci, mi)| {
            let c = &cs[ci];
            let m = &c.modes[mi];
            Term {
                camera: c.camera_point,
                target: m.centroid,
                whiten: use_covariance.then(|| {
                    Cholesky::new(m.information)
                        .map(|ch| ch.l().transpose())
                        .unwrap_or_else(Matrix3::identity)
                }),
            }
        })
        .collect();
    let k = if use_covariance { HUBER_WHITENED } else { HUBER_EUCLIDEAN };
    let mut pose = h.pose;
    let mut cost = objective(&terms, &pose, k);
    let finish = |pose: RigidPose, cost: f64, status| {
        let energy = if terms.is_empty() { h.energy } else { cost / terms.len() as f64 };
        (
            PoseHypothesis {
                pose,
                energy,
                inliers: inliers.to_vec(),
            },
            status,
        )
    };
    if terms.len() < 3 {
        return finish(pose, cost, LmStatus::SingularNormalEquations);
    }
    let mut lambda = INITIAL_LAMBDA;
    for _ in 0..MAX_ITERATIONS {
        let mut a = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for t in &terms {
            let rx = pose.rotation * t.camera;
            let mut j = nalgebra::Matrix3x6::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rx.cross_matrix()));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let (j, r) = match &t.whiten {
                Some(w) => (w * j, w * (rx + pose.translation - t.target)),
                None => (j, rx + pose.translation - t.target),
            };
            let s = r.norm();
            let w = if s <= k { 1.0 } else { k / s };
            a += j.transpose() * j * w;
            g += j.transpose() * r * w;
        }
        loop {
            let mut damped = a;
            for i in 0..6 {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-12);
            }
            let Some(ch) = Cholesky::new(damped) else {
                return finish(h.pose, objective(&terms, &h.pose, k), LmStatus::SingularNormalEquations);
            };
            let delta = -ch.solve(&g);
            if !delta.iter().all(|v| v.is_finite()) {
                return finish(h.pose, objective(&terms, &h.pose, k), LmStatus::SingularNormalEquations);
            }
            let step = delta.norm();
            let candidate = apply_twist(&pose, &delta);
            let new_cost = objective(&terms, &candidate, k);
            if new_cost < cost {
                pose = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                if step < MIN_STEP {
                    return finish(pose, cost, LmStatus::Converged);
                }
                break;
            }
            lambda *= 10.0;
            if step < MIN_STEP || lambda > 1e12 {
                return finish(pose, cost, LmStatus::Converged);
            }
        }
    }
    finish(pose, cost, LmStatus::MaxIterations)
}

/// The objective minimised by [`lm_refine`], for tests and diagnostics.
pub fn lm_objective(pose: &RigidPose, cs: &[Correspondence], inliers: &[(usize, usize)], use_covariance: bool) -> f64 {
    let k = if use_covariance { HUBER_WHITENED } else { HUBER_EUCLIDEAN };
    inliers
        .iter()
        .map(|&(ci, mi)| {
            let m = &cs[ci].modes[mi];
            let r = pose.transform_point(&cs[ci].camera_point) - m.centroid;
            let s = if use_covariance { (r.transpose() * m.information * r)[0].max(0.0).sqrt() } else { r.norm() };
            huber(s, k)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tests::{fixture, mode_at};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_inliers(cs: &[Correspondence]) -> Vec<(usize, usize)> {
        (0..cs.len()).map(|i| (i, 0)).collect()
    }

    #[test]
    fn zero_residual_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (gt, cs) = fixture(&mut rng, 50, 0.0, 0.0);
        for cov in [false, true] {
            let h = PoseHypothesis::new(gt);
            let (out, status) = lm_refine(&h, &cs, &all_inliers(&cs), cov);
            assert_ne!(status, LmStatus::SingularNormalEquations);
            assert!((out.pose.rotation - gt.rotation).norm() < 1e-9);
            assert!((out.pose.translation - gt.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn recovers_perturbed_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (gt, cs) = fixture(&mut rng, 80, 0.0, 0.0);
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let perturb = RigidPose::from_axis_angle(axis * 2f64.to_radians(), Vector3::new(0.02, 0.0, 0.0));
        for cov in [false, true] {
            let h = PoseHypothesis::new(perturb.compose(&gt));
            let (out, _) = lm_refine(&h, &cs, &all_inliers(&cs), cov);
            assert!((out.pose.rotation - gt.rotation).norm() < 1e-6, "cov={cov}");
            assert!((out.pose.translation - gt.translation).norm() < 1e-6, "cov={cov}");
        }
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (gt, cs) = fixture(&mut rng, 30, 0.02, 0.2);
            let aa = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let t = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let start = RigidPose::from_axis_angle(aa, t).compose(&gt);
            let inl = all_inliers(&cs);
            let cov = seed % 2 == 0;
            let before = lm_objective(&start, &cs, &inl, cov);
            let (out, _) = lm_refine(&PoseHypothesis::new(start), &cs, &inl, cov);
            let after = lm_objective(&out.pose, &cs, &inl, cov);
            assert!(after <= before + 1e-12, "seed {seed}: {before} -> {after}");
            assert!(out.pose.is_valid(1e-9));
        }
    }

    #[test]
    fn too_few_inliers_is_singular() {
        let cs = vec![Correspondence::new([0, 0], Vector3::new(0.0, 0.0, 1.0), None, vec![mode_at(Vector3::zeros())])];
        let h = PoseHypothesis::new(RigidPose::identity());
        let (out, status) = lm_refine(&h, &cs, &[(0, 0)], false);
        assert_eq!(status, LmStatus::SingularNormalEquations);
        assert_eq!(out.pose, h.pose);
    }
}
