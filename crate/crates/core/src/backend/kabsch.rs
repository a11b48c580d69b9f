//! Closed-form least-squares rigid alignment.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::BackendError;
use crate::geometry::RigidPose;

/// Relative eigenvalue below which a point set counts as collinear.
const COLLINEAR_RATIO: f64 = 1e-10;

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn is_degenerate(points: &[Vector3<f64>], mean: &Vector3<f64>) -> bool {
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        scatter += d * d.transpose();
    }
    let mut eig = SymmetricEigen::new(scatter).eigenvalues;
    eig.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    eig[0] <= f64::MIN_POSITIVE || eig[1] <= COLLINEAR_RATIO * eig[0]
}

/// Pose `H` minimising Σ‖H·camera_i − world_i‖², with a proper rotation.
pub fn kabsch(camera: &[Vector3<f64>], world: &[Vector3<f64>]) -> Result<RigidPose, BackendError> {
    assert_eq!(camera.len(), world.len(), "kabsch needs paired points");
    if camera.len() < 3 {
        return Err(BackendError::DegenerateConfiguration);
    }
    let mc = centroid(camera);
    let mw = centroid(world);
    if is_degenerate(camera, &mc) || is_degenerate(world, &mw) {
        return Err(BackendError::DegenerateConfiguration);
    }
    let mut h = Matrix3::zeros();
    for (c, w) in camera.iter().zip(world) {
        h += (c - mc) * (w - mw).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v").transpose();
    let mut d = Matrix3::identity();
    d[(2, 2)] = (v * u.transpose()).determinant().signum();
    let rotation = v * d * u.transpose();
    Ok(RigidPose {
        rotation,
        translation: mw - rotation * mc,
    })
}
