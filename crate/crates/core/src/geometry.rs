//! Rigid transforms, the pinhole camera, and the constant-velocity predictor.
//!
//! Poses are stored camera-to-world. A point `p_w` in the world maps to the
//! camera frame as `p_c = R^T (p_w - t)`. Camera axes follow the usual
//! computer-vision convention: x right, y down, z forward.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from raw quaternion components, normalizing them.
    pub fn from_parts(qx: f64, qy: f64, qz: f64, qw: f64, t: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self::new(q, t)
    }

    /// Camera pose at `eye` looking at `target`, with `up` pointing opposite
    /// to the image y axis.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let m = Matrix3::from_columns(&[x, y, z]);
        let rotation = UnitQuaternion::from_matrix(&m);
        Self::new(rotation, eye)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`, i.e. the matrix product `self * other`.
    pub fn compose(&self, other: &RigidPose) -> Self {
        let rotation = renormalize(self.rotation * other.rotation);
        let translation = self.rotation * other.translation + self.translation;
        Self::new(rotation, translation)
    }

    /// Maps a camera-frame point into the world frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a world point into the camera frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    /// Applies a tangent-space update on the right (in the camera frame).
    ///
    /// The tangent layout is `[ω (3 rotation), v (3 translation)]` and the
    /// update is `self ∘ (Exp(ω), v)`.
    pub fn retract(&self, xi: &Vector6<f64>) -> Self {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let delta = RigidPose::new(UnitQuaternion::from_scaled_axis(omega), v);
        self.compose(&delta)
    }

    /// Translation distance and rotation angle (radians) between two poses.
    pub fn distance(&self, other: &RigidPose) -> (f64, f64) {
        let dt = (self.translation - other.translation).norm();
        let dr = self.rotation.angle_to(&other.rotation);
        (dt, dr)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(q.into_inner())
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
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
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn focal_mean(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Projects a world point; returns the pixel position and camera-frame depth.
pub fn project(
    point: &Vector3<f64>,
    pose: &RigidPose,
    k: &Intrinsics,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let pc = pose.inverse_transform_point(point);
    if pc.z <= 0.0 {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    Ok((Vector2::new(u, v), pc.z))
}

/// Back-projects a pixel at the given camera depth into the world.
pub fn unproject(pixel: &Vector2<f64>, depth: f64, pose: &RigidPose, k: &Intrinsics) -> Vector3<f64> {
    let pc = Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    );
    pose.transform_point(&pc)
}

/// Applies the last inter-frame motion once more.
pub fn constant_velocity_predict(prev: &RigidPose, prev2: &RigidPose) -> RigidPose {
    let motion = prev2.inverse().compose(prev);
    prev.compose(&motion)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
