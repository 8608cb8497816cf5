use nalgebra::SymmetricEigen;

use super::{Matrix3, Point3, PointCloud, SpatialIndex, Vector3};
use crate::error::{Error, Result};
use crate::par;

/// Normal of the neighborhood: eigenvector of the covariance with the
/// smallest eigenvalue, sign fixed so the first nonzero component is positive.
pub(crate) fn neighborhood_normal(points: &[Point3], ids: impl Iterator<Item = usize> + Clone) -> Vector3 {
    let n = ids.clone().count() as f64;
    let mean = ids.clone().fold(Vector3::zeros(), |acc, i| acc + points[i].coords) / n;
    let cov = ids.fold(Matrix3::zeros(), |acc, i| {
        let d = points[i].coords - mean;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let imin = eig.eigenvalues.imin();
    let mut normal: Vector3 = eig.eigenvectors.column(imin).into_owned();
    let norm = normal.norm();
    normal = if norm > 0.0 { normal / norm } else { Vector3::z() };
    if let Some(first) = normal.iter().copied().find(|c| *c != 0.0) {
        if first < 0.0 {
            normal = -normal;
        }
    }
    normal
}

fn orient_toward(normal: Vector3, p: &Point3, viewpoints: &[Point3]) -> Vector3 {
    let origin = Point3::origin();
    let vp = viewpoints
        .iter()
        .min_by(|a, b| (*a - p).norm_squared().total_cmp(&(*b - p).norm_squared()))
        .unwrap_or(&origin);
    if normal.dot(&(vp - p)) < 0.0 {
        -normal
    } else {
        normal
    }
}

/// Estimates a unit normal per point from its `k` nearest neighbors
/// (the point itself included), oriented toward the nearest viewpoint.
pub fn estimate_normals(c: &PointCloud, k: usize) -> Result<PointCloud> {
    let index = SpatialIndex::new(c.clone().without_normals());
    estimate_normals_with_index(c, &index, k)
}

/// As [`estimate_normals`], reusing an index built over the same cloud.
pub fn estimate_normals_with_index(c: &PointCloud, index: &SpatialIndex, k: usize) -> Result<PointCloud> {
    if k < 3 {
        return Err(Error::InvalidParameter(format!("normal neighborhood k must be >= 3, got {k}")));
    }
    if c.len() < k {
        return Err(Error::InsufficientPoints { needed: k, got: c.len() });
    }
    if index.len() != c.len() {
        return Err(Error::LengthMismatch {
            what: "index vs cloud",
            left: index.len(),
            right: c.len(),
        });
    }
    let points = c.points();
    let viewpoints = c.viewpoints();
    let normals = par::map_range(c.len(), |i| {
        let nbrs = index.knn(&points[i], k);
        let n = neighborhood_normal(points, nbrs.iter().map(|nb| nb.id));
        orient_toward(n, &points[i], viewpoints)
    });
    c.clone().with_normals(normals)
}
