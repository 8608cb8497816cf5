//! Closed-form least-squares rigid alignment (Kabsch / Umeyama without scale).

use nalgebra::{SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::geometry::{Matrix3, Point3, RigidTransform, Vector3};

/// Relative eigenvalue below which a point set counts as collinear.
const COLLINEAR_RATIO: f64 = 1e-10;

fn centroid(pts: &[Point3]) -> Vector3 {
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / pts.len() as f64
}

fn is_collinear(pts: &[Point3], mean: &Vector3) -> bool {
    let scatter = pts.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p.coords - mean;
        acc + d * d.transpose()
    });
    let mut ev: Vec<f64> = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= COLLINEAR_RATIO * ev[0]
}

/// Optimal rotation and translation without degeneracy checks. Any optimal
/// solution is returned when the problem is under-determined.
pub(crate) fn fit_unchecked(src: &[Point3], tgt: &[Point3]) -> RigidTransform {
    debug_assert_eq!(src.len(), tgt.len());
    if src.is_empty() {
        return RigidTransform::identity();
    }
    let mu_s = centroid(src);
    let mu_t = centroid(tgt);
    fit_centered(src, tgt, &mu_s, &mu_t)
}

fn fit_centered(src: &[Point3], tgt: &[Point3], mu_s: &Vector3, mu_t: &Vector3) -> RigidTransform {
    // H = sum (t - mu_t)(s - mu_s)^T
    let h = src.iter().zip(tgt).fold(Matrix3::zeros(), |acc, (s, t)| {
        acc + (t.coords - mu_t) * (s.coords - mu_s).transpose()
    });
    let svd = SVD::new(h, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    RigidTransform::from_rotation_unchecked(r, mu_t - r * mu_s)
}

/// Rigid transform minimizing `sum |R s_i + t - t_i|^2` over paired slices.
pub fn fit_rigid(src: &[Point3], tgt: &[Point3]) -> Result<RigidTransform> {
    if src.len() != tgt.len() {
        return Err(Error::LengthMismatch {
            what: "source vs target pairs",
            left: src.len(),
            right: tgt.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateConfiguration("fewer than 3 point pairs"));
    }
    let mu_s = centroid(src);
    let mu_t = centroid(tgt);
    if is_collinear(src, &mu_s) || is_collinear(tgt, &mu_t) {
        return Err(Error::DegenerateConfiguration("point pairs are collinear"));
    }
    Ok(fit_centered(src, tgt, &mu_s, &mu_t))
}

/// Rigid transform minimizing `sum |R p_s + t - p_t|^2` over `(p_s, p_t)`.
/// The rotation is always proper (reflections corrected).
pub fn best_rigid_transform(pairs: &[(Point3, Point3)]) -> Result<RigidTransform> {
    let (src, tgt): (Vec<Point3>, Vec<Point3>) = pairs.iter().copied().unzip();
    fit_rigid(&src, &tgt)
}

/// Sum of squared residuals of `t` over paired slices.
pub fn alignment_objective(t: &RigidTransform, src: &[Point3], tgt: &[Point3]) -> f64 {
    src.iter()
        .zip(tgt)
        .map(|(s, q)| (t.transform_point(s) - q).norm_squared())
        .sum()
}
