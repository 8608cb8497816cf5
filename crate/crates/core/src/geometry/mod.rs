//! Foundational 3D types: points, clouds, rigid transforms, spatial queries.
//!
//! Frames are right-handed, z-up, in meters.

mod kdtree;
mod normals;
pub mod ply;
mod transform;
mod voxel;

pub use kdtree::{KdTree, Neighbor, SpatialIndex};
pub use normals::{estimate_normals, estimate_normals_with_index};
pub use transform::{compose, RigidTransform};
pub use voxel::{voxel_downsample, voxel_key, VoxelKey};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;
pub type Matrix3 = nalgebra::Matrix3<f64>;

const NORMAL_TOLERANCE: f64 = 1e-6;

/// An ordered set of 3D points in a named frame, with optional unit normals.
///
/// `viewpoints` are the sensor origins (in this cloud's frame) the points were
/// observed from. Normal estimation orients each normal toward the nearest
/// viewpoint; an empty list means the frame origin.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "CloudRepr")]
pub struct PointCloud {
    points: Vec<Point3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normals: Option<Vec<Vector3>>,
    frame_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    viewpoints: Vec<Point3>,
}

#[derive(Deserialize)]
struct CloudRepr {
    points: Vec<Point3>,
    #[serde(default)]
    normals: Option<Vec<Vector3>>,
    frame_id: String,
    #[serde(default)]
    viewpoints: Vec<Point3>,
}

impl TryFrom<CloudRepr> for PointCloud {
    type Error = crate::error::Error;

    fn try_from(r: CloudRepr) -> Result<Self> {
        let c = PointCloud::new(r.points, r.frame_id)?.with_viewpoints(r.viewpoints);
        match r.normals {
            Some(n) => c.with_normals(n),
            None => Ok(c),
        }
    }
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame_id: impl Into<String>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            normals: None,
            frame_id: frame_id.into(),
            viewpoints: Vec::new(),
        })
    }

    /// Builds a cloud from `[x, y, z]` triples.
    pub fn from_xyz(xyz: &[[f64; 3]], frame_id: impl Into<String>) -> Result<Self> {
        Self::new(xyz.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(), frame_id)
    }

    pub fn empty(frame_id: impl Into<String>) -> Self {
        Self {
            frame_id: frame_id.into(),
            ..Self::default()
        }
    }

    pub fn with_normals(mut self, normals: Vec<Vector3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(crate::Error::LengthMismatch {
                what: "normals vs points",
                left: normals.len(),
                right: self.points.len(),
            });
        }
        if let Some(i) = normals
            .iter()
            .position(|n| (n.norm() - 1.0).abs() > NORMAL_TOLERANCE)
        {
            return Err(invalid(format!("normal {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_viewpoints(mut self, viewpoints: Vec<Point3>) -> Self {
        self.viewpoints = viewpoints;
        self
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3]> {
        self.normals.as_deref()
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    pub fn set_frame_id(&mut self, frame_id: impl Into<String>) {
        self.frame_id = frame_id.into();
    }

    pub fn viewpoints(&self) -> &[Point3] {
        &self.viewpoints
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `t` to every point (and rotates normals and viewpoints).
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        apply(t, self)
    }

    /// Appends another cloud's points. Normals are kept only if both clouds
    /// carry them.
    pub fn extend_from(&mut self, other: &PointCloud) {
        let keep_normals = match (&mut self.normals, &other.normals) {
            (Some(a), Some(b)) => {
                a.extend_from_slice(b);
                true
            }
            (None, _) if self.points.is_empty() && other.normals.is_some() => {
                self.normals = other.normals.clone();
                true
            }
            _ => false,
        };
        if !keep_normals {
            self.normals = None;
        }
        self.points.extend_from_slice(&other.points);
        self.viewpoints.extend_from_slice(&other.viewpoints);
    }

    /// Keeps the points for which `keep` returns true.
    pub fn filtered(&self, mut keep: impl FnMut(&Point3) -> bool) -> PointCloud {
        let mask: Vec<bool> = self.points.iter().map(&mut keep).collect();
        let points = self
            .points
            .iter()
            .zip(&mask)
            .filter_map(|(p, &k)| k.then_some(*p))
            .collect();
        let normals = self.normals.as_ref().map(|ns| {
            ns.iter()
                .zip(&mask)
                .filter_map(|(n, &k)| k.then_some(*n))
                .collect()
        });
        PointCloud {
            points,
            normals,
            frame_id: self.frame_id.clone(),
            viewpoints: self.viewpoints.clone(),
        }
    }

    pub(crate) fn from_parts(
        points: Vec<Point3>,
        normals: Option<Vec<Vector3>>,
        frame_id: String,
        viewpoints: Vec<Point3>,
    ) -> Self {
        debug_assert!(normals.as_ref().is_none_or(|n| n.len() == points.len()));
        Self {
            points,
            normals,
            frame_id,
            viewpoints,
        }
    }
}

/// Maps every point `p` to `R p + t`; normals are rotated only.
pub fn apply(t: &RigidTransform, c: &PointCloud) -> PointCloud {
    PointCloud {
        points: c.points.iter().map(|p| t.transform_point(p)).collect(),
        normals: c
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| t.transform_vector(n).normalize()).collect()),
        frame_id: c.frame_id.clone(),
        viewpoints: c.viewpoints.iter().map(|p| t.transform_point(p)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_identity_is_noop() {
        let c = PointCloud::from_xyz(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]], "s").unwrap();
        assert_eq!(apply(&RigidTransform::identity(), &c), c);
    }

    #[test]
    fn apply_pure_translation() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]], "s").unwrap();
        let t = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(apply(&t, &c).points()[0], Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn apply_rotation_about_z() {
        let c = PointCloud::from_xyz(&[[1.0, 0.0, 0.0]], "s")
            .unwrap()
            .with_normals(vec![Vector3::new(1.0, 0.0, 0.0)])
            .unwrap();
        let t = RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let out = apply(&t, &c);
        assert!((out.points()[0] - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let n = out.normals().unwrap()[0];
        assert!((n - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((n.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(PointCloud::from_xyz(&[[f64::NAN, 0.0, 0.0]], "s").is_err());
    }

    #[test]
    fn rejects_bad_normals() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]], "s").unwrap();
        assert!(c.clone().with_normals(vec![Vector3::new(2.0, 0.0, 0.0)]).is_err());
        assert!(c.with_normals(vec![]).is_err());
    }
}
