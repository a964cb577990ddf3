//! Shared geometric and vector primitives.
//!
//! Rotations are stored as 3×3 matrices; quaternions only appear at the
//! trajectory-file boundary. Yaw is the rotation about the z axis (z-up),
//! extracted from the first column of the rotation matrix, and every angle
//! leaving this module is wrapped to (−180°, 180°].

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero by [`l2_normalize`].
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Orthonormality tolerance for [`PoseSE3::new`].
pub const ROTATION_TOL: f64 = 1e-9;

/// Depths at or below this (meters) are behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (max deviation {0:e})")]
    InvalidRotation(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

/// Rigid transform: `x ↦ rotation·x + translation` (translation in meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validated constructor: `RᵀR = I` and `det R = +1` within [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let dev = rotation_deviation(&rotation);
        if dev > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation(dev));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose from a rotation that is known to be valid (e.g. the
    /// output of an SVD-based fit). Debug builds still check it.
    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(rotation_deviation(&rotation) < 1e-6);
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about z by `yaw_deg` followed by a translation.
    pub fn from_yaw_deg(yaw_deg: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rot_z_deg(yaw_deg),
            translation,
        }
    }

    /// From a quaternion in x-y-z-w order. The quaternion is normalized first.
    pub fn from_quaternion_xyzw(q: [f64; 4], translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if q.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("quaternion"));
        }
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        if quat.norm() < ZERO_NORM_EPS {
            return Err(GeometryError::ZeroQuaternion);
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Self {
            rotation: *unit.to_rotation_matrix().matrix(),
            translation,
        })
    }

    /// Quaternion in x-y-z-w order with non-negative w.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let unit = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q = unit.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn yaw_deg(&self) -> f64 {
        yaw_from_rotation(&self.rotation)
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let r = (self.rotation - other.rotation).amax();
        let t = (self.translation - other.translation).amax();
        r.max(t)
    }
}

fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// `pose_a⁻¹ ∘ pose_b`: the pose of `b` expressed in the frame of `a`.
pub fn se3_relative(pose_a: &PoseSE3, pose_b: &PoseSE3) -> PoseSE3 {
    pose_a.inverse().compose(pose_b)
}

pub fn rot_z_deg(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Wraps an angle in degrees to (−180, 180].
pub fn wrap_deg(deg: f64) -> f64 {
    let mut w = deg % 360.0;
    if w > 180.0 {
        w -= 360.0;
    } else if w <= -180.0 {
        w += 360.0;
    }
    w
}

/// Yaw in degrees, `atan2(R[1,0], R[0,0])`, wrapped to (−180, 180].
pub fn yaw_from_rotation(r: &Matrix3<f64>) -> f64 {
    wrap_deg(r[(1, 0)].atan2(r[(0, 0)]).to_degrees())
}

/// Result of [`l2_normalize`]. `zero_norm` is set when the input was left
/// unchanged because its norm was below [`ZERO_NORM_EPS`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub zero_norm: bool,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let n = l2_norm(v);
    if n < ZERO_NORM_EPS {
        return Normalized {
            values: v.to_vec(),
            zero_norm: true,
        };
    }
    Normalized {
        values: v.iter().map(|x| x / n).collect(),
        zero_norm: false,
    }
}

/// In-place variant; returns `false` (and leaves `v` untouched) on zero norm.
pub fn l2_normalize_in_place(v: &mut [f64]) -> bool {
    let n = l2_norm(v);
    if n < ZERO_NORM_EPS {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product of two unit vectors, clamped to [−1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::DimensionMismatch(a.len(), b.len()));
    }
    // Identical unit inputs score exactly 1, free of rounding in the dot product.
    if a == b && l2_norm(a) >= ZERO_NORM_EPS {
        return Ok(1.0);
    }
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Pinhole camera with a LiDAR→camera extrinsic. No distortion model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub cam_from_lidar: PoseSE3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionFailure {
    BehindCamera,
    OutOfBounds,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        cam_from_lidar: PoseSE3,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_from_lidar,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(0.0..self.width as f64).contains(&self.cx) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(0.0..self.height as f64).contains(&self.cy) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Projection, ProjectionFailure> {
        let z = p.z;
        if z <= MIN_DEPTH {
            return Err(ProjectionFailure::BehindCamera);
        }
        let u = self.fx * p.x / z + self.cx;
        let v = self.fy * p.y / z + self.cy;
        if !(0.0..self.width as f64).contains(&u) || !(0.0..self.height as f64).contains(&v) {
            return Err(ProjectionFailure::OutOfBounds);
        }
        Ok(Projection { u, v, depth: z })
    }

    /// Inverse of [`Self::project`] at a given depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }
}

/// Free-function form of [`CameraIntrinsics::project`].
pub fn project_to_image(point: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<Projection, ProjectionFailure> {
    intr.project(point)
}

/// Serializable pose representation used by manifests: translation plus an
/// x-y-z-w quaternion.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<PoseSE3, GeometryError> {
        PoseSE3::from_quaternion_xyzw(self.q, Vector3::from(self.t))
    }

    pub fn from_pose(p: &PoseSE3) -> Self {
        let t = p.translation();
        Self {
            t: [t.x, t.y, t.z],
            q: p.quaternion_xyzw(),
        }
    }
}
