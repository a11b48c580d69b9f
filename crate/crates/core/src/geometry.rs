//! Rigid poses, the pinhole camera model and pose-error metrics.

use nalgebra::{Matrix3, Matrix4, Point2, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({0}, {1}) has no valid depth")]
    InvalidDepth(usize, usize),
    #[error("pixel ({0}, {1}) lies outside the image")]
    OutOfBounds(usize, usize),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with determinant +1")]
    NotARotation,
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self {
            rotation,
            translation,
        };
        if pose.is_valid(1e-6) {
            Ok(pose)
        } else {
            Err(GeometryError::NotARotation)
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        r.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && orth <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    /// Projects the rotation back onto SO(3) (SVD polar factor).
    pub fn orthonormalized(&self) -> RigidPose {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        d[(2, 2)] = (u * v_t).determinant().signum();
        RigidPose {
            rotation: u * d * v_t,
            translation: self.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx = {} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy = {} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// `depth · K⁻¹ · (u, v, 1)ᵀ`
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            depth * (u - self.cx) / self.fx,
            depth * (v - self.cy) / self.fy,
            depth,
        )
    }
}

/// Per-pixel metric depth. Invalid pixels hold `0.0`; every non-positive or
/// non-finite input value is normalised to that marker on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    values: Vec<f32>,
}

impl DepthImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, mut values: Vec<f32>) -> Self {
        assert_eq!(values.len(), width * height, "depth buffer size mismatch");
        for v in &mut values {
            if !(v.is_finite() && *v > 0.0) {
                *v = 0.0;
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let d = self.values[y * self.width + x];
        (d > 0.0).then_some(d)
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f32) {
        let d = if depth.is_finite() && depth > 0.0 {
            depth
        } else {
            0.0
        };
        self.values[y * self.width + x] = d;
    }

    /// Raw buffer, `0.0` marking invalid pixels.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Back-projects pixel `u` through its depth into world space.
pub fn back_project(
    u: [usize; 2],
    depth: &DepthImage,
    k: &CameraIntrinsics,
    pose: &RigidPose,
) -> Result<Vector3<f64>, GeometryError> {
    let [x, y] = u;
    if x >= depth.width || y >= depth.height {
        return Err(GeometryError::OutOfBounds(x, y));
    }
    let d = depth.get(x, y).ok_or(GeometryError::InvalidDepth(x, y))?;
    Ok(pose.transform_point(&k.unproject(x as f64, y as f64, d as f64)))
}

pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Point2<f64>, GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(Point2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Smallest box containing `self` mapped through `x ↦ m·x + offset`.
    pub fn transformed(&self, m: &Matrix3<f64>, offset: &Vector3<f64>) -> Aabb {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for corner in 0..8 {
            let c = Vector3::new(
                if corner & 1 == 0 { self.min.x } else { self.max.x },
                if corner & 2 == 0 { self.min.y } else { self.max.y },
                if corner & 4 == 0 { self.min.z } else { self.max.z },
            );
            let q = m * c + offset;
            lo = lo.inf(&q);
            hi = hi.sup(&q);
        }
        Aabb { min: lo, max: hi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// metres
    pub translation_error: f64,
    /// degrees
    pub angular_error: f64,
}

impl PoseError {
    pub fn within(&self, max_translation: f64, max_angle_deg: f64) -> bool {
        self.translation_error <= max_translation && self.angular_error <= max_angle_deg
    }

    /// The 5 cm / 5° relocalisation criterion.
    pub fn is_success(&self) -> bool {
        self.within(0.05, 5.0)
    }
}

/// Angle (radians) of the rotation `a · bᵀ`.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a * b.transpose();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

pub fn pose_error(a: &RigidPose, b: &RigidPose) -> PoseError {
    PoseError {
        translation_error: (a.translation - b.translation).norm(),
        angular_error: rotation_angle_between(&a.rotation, &b.rotation).to_degrees(),
    }
}

/// Camera-to-world pose of a camera at `eye` looking at `target`, with
/// `up` as the world-space up hint. Camera axes: x right, y down, z forward.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> RigidPose {
    let z = (target - eye).normalize();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    RigidPose {
        rotation: Matrix3::from_columns(&[x, y, z]),
        translation: eye,
    }
}
