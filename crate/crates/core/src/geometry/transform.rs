use nalgebra::{Rotation3, UnitQuaternion, SVD};
use serde::{Deserialize, Serialize};

use super::{Matrix3, Point3, Vector3};
use crate::error::{Error, Result};

/// Orthonormality drift beyond which the rotation is re-projected onto SO(3).
const DRIFT_TOLERANCE: f64 = 1e-9;
/// Drift beyond which a matrix is rejected rather than repaired.
const REJECT_TOLERANCE: f64 = 1e-4;

/// An element of SE(3): `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3,
    translation: Vector3,
}

/// Serialized form: row-major rotation and translation.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        RigidTransform::new(m, Vector3::from(r.translation))
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let m = t.rotation;
        TransformRepr {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

fn orthonormality_drift(m: &Matrix3) -> f64 {
    (m.transpose() * m - Matrix3::identity()).abs().max()
}

/// Closest rotation in the Frobenius sense (polar decomposition).
fn project_to_so3(m: &Matrix3) -> Matrix3 {
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

impl RigidTransform {
    /// Validates `rotation` as a proper rotation. Small numerical drift is
    /// repaired by polar decomposition; anything larger is an error.
    pub fn new(rotation: Matrix3, translation: Vector3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let drift = orthonormality_drift(&rotation);
        if drift > REJECT_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (drift {drift:e})"
            )));
        }
        if rotation.determinant() < 0.0 {
            return Err(Error::InvalidTransform("rotation has determinant -1".into()));
        }
        Ok(Self::from_parts_repaired(rotation, translation))
    }

    fn from_parts_repaired(rotation: Matrix3, translation: Vector3) -> Self {
        let rotation = if orthonormality_drift(&rotation) > DRIFT_TOLERANCE
            || (rotation.determinant() - 1.0).abs() > DRIFT_TOLERANCE
        {
            project_to_so3(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    /// Builds from a matrix known to be a rotation up to round-off.
    pub(crate) fn from_rotation_unchecked(rotation: Matrix3, translation: Vector3) -> Self {
        Self::from_parts_repaired(rotation, translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vector3) -> Self {
        Self::from_parts_repaired(*rotation.matrix(), translation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3) -> Self {
        Self::from_rotation(&q.to_rotation_matrix(), translation)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3, angle: f64, translation: Vector3) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self::from_rotation(&Rotation3::from_axis_angle(&axis, angle), translation)
    }

    /// Extrinsic roll (x), pitch (y), yaw (z).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3) -> Self {
        Self::from_rotation(&Rotation3::from_euler_angles(roll, pitch, yaw), translation)
    }

    pub fn from_yaw(yaw: f64, translation: Vector3) -> Self {
        Self::from_euler(0.0, 0.0, yaw, translation)
    }

    pub fn rotation(&self) -> &Matrix3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3 {
        &self.translation
    }

    /// The translation as a point (the frame origin in the parent frame).
    pub fn origin(&self) -> Point3 {
        Point3::from(self.translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Heading of the body x-axis in the parent xy-plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        // atan2 keeps full precision near zero, where acos of the trace
        // bottoms out around 1e-8 rad
        let r = &self.rotation;
        let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (0.5 * skew.norm()).atan2(0.5 * (r.trace() - 1.0))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self::from_parts_repaired(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vector3) -> Vector3 {
        self.rotation * v
    }

    /// Translation distance and rotation angle between two poses.
    pub fn error_to(&self, other: &RigidTransform) -> (f64, f64) {
        let delta = self.inverse().compose(other);
        (
            (self.translation - other.translation).norm(),
            delta.rotation_angle(),
        )
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}
