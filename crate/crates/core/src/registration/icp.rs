use serde::{Deserialize, Serialize};

use super::kabsch::{alignment_objective, fit_rigid};
use super::{evaluate_registration, IcpConfig, RegistrationResult};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, SpatialIndex, Vector3};

type Matrix6 = nalgebra::Matrix6<f64>;
type Vector6 = nalgebra::Vector6<f64>;
use crate::par;

/// Objective of one ICP iteration over that iteration's correspondence set,
/// before and after the closed-form update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpIteration {
    pub correspondences: usize,
    pub objective_before: f64,
    pub objective_after: f64,
}

impl IcpIteration {
    pub fn is_monotone(&self) -> bool {
        self.objective_after <= self.objective_before + 1e-9 * self.objective_before.max(1.0)
    }
}

/// Point-to-point ICP from `init`. See [`icp_refine_traced`].
pub fn icp_refine(src: &PointCloud, tgt: &SpatialIndex, init: &RigidTransform, cfg: &IcpConfig) -> Result<RegistrationResult> {
    icp_refine_traced(src, tgt, init, cfg).map(|(r, _)| r)
}

/// Point-to-point ICP returning the per-iteration objective trace.
///
/// Each iteration matches every transformed source point to its nearest
/// target point closer than `max_correspondence_distance`, then solves the
/// closed-form alignment over those pairs. Stops when the pose change drops
/// below both epsilons or after `max_iterations`.
pub fn icp_refine_traced(
    src: &PointCloud,
    tgt: &SpatialIndex,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<(RegistrationResult, Vec<IcpIteration>)> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::EmptyInput("ICP source cloud"));
    }
    if tgt.is_empty() {
        return Err(Error::EmptyInput("ICP target cloud"));
    }
    let max_d2 = cfg.max_correspondence_distance * cfg.max_correspondence_distance;
    let tgt_points = tgt.cloud().points();
    let mut current = *init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut violations = 0;

    for iteration in 0..cfg.max_iterations {
        let matches = par::map_slice(src.points(), |p| {
            let moved = current.transform_point(p);
            tgt.nearest_within_squared(&moved, max_d2)
        });
        let mut sp = Vec::with_capacity(matches.len());
        let mut tp = Vec::with_capacity(matches.len());
        let mut before = 0.0;
        for (p, m) in src.points().iter().zip(&matches) {
            if let Some((j, d2)) = *m {
                sp.push(*p);
                tp.push(tgt_points[j]);
                before += d2;
            }
        }
        if sp.is_empty() {
            if iteration == 0 {
                return Err(Error::NoOverlap {
                    max_distance: cfg.max_correspondence_distance,
                });
            }
            break;
        }
        let Ok(next) = fit_rigid(&sp, &tp) else {
            break;
        };
        let step = IcpIteration {
            correspondences: sp.len(),
            objective_before: before,
            objective_after: alignment_objective(&next, &sp, &tp),
        };
        trace.push(step);
        if !step.is_monotone() {
            violations += 1;
            break;
        }
        let dt = (next.translation() - current.translation()).norm();
        let dr = (next.rotation() * current.rotation().transpose())
            .trace()
            .mul_add(0.5, -0.5)
            .clamp(-1.0, 1.0)
            .acos();
        current = next;
        if dt < cfg.translation_epsilon && dr < cfg.rotation_epsilon {
            converged = true;
            break;
        }
    }

    let (fitness, inlier_rmse) = evaluate_registration(src, tgt, &current, cfg.max_correspondence_distance)?;
    Ok((
        RegistrationResult {
            transform: current,
            fitness,
            inlier_rmse,
            iterations_used: trace.len(),
            converged,
            low_confidence: false,
            monotonic_violations: violations,
        },
        trace,
    ))
}

/// Point-to-plane ICP from `init` against a target carrying normals.
///
/// Each iteration linearizes the plane residuals `n . (T p - q)` around the
/// current pose and solves the 6x6 normal equations for a small rotation and
/// translation. Source points whose nearest target has a zero normal are
/// skipped. Residuals along a surface cost nothing, so repeated sampling
/// patterns (LiDAR rings on flat ground) do not pull the estimate toward
/// zero motion the way point-to-point matching does.
pub fn icp_point_to_plane(src: &PointCloud, tgt: &SpatialIndex, init: &RigidTransform, cfg: &IcpConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::EmptyInput("ICP source cloud"));
    }
    if tgt.is_empty() {
        return Err(Error::EmptyInput("ICP target cloud"));
    }
    let normals = tgt.cloud().normals().ok_or(Error::MissingNormals)?;
    let tgt_points = tgt.cloud().points();
    let max_d2 = cfg.max_correspondence_distance * cfg.max_correspondence_distance;
    let mut current = *init;
    let mut converged = false;
    let mut iterations = 0;
    for iteration in 0..cfg.max_iterations {
        iterations = iteration + 1;
        let rows = par::map_slice(src.points(), |p| {
            let moved = current.transform_point(p);
            let (j, _) = tgt.nearest_within_squared(&moved, max_d2)?;
            let n = normals[j];
            (n != Vector3::zeros()).then(|| {
                let r = n.dot(&(moved - tgt_points[j]));
                let jac = Vector6::from_iterator(moved.coords.cross(&n).iter().chain(n.iter()).copied());
                (jac, r)
            })
        });
        let (mut h, mut g, mut used) = (Matrix6::zeros(), Vector6::zeros(), 0);
        for (jac, r) in rows.iter().flatten() {
            h += jac * jac.transpose();
            g += jac * *r;
            used += 1;
        }
        if used < 6 {
            if iteration == 0 {
                return Err(Error::NoOverlap {
                    max_distance: cfg.max_correspondence_distance,
                });
            }
            break;
        }
        let Some(x) = h.cholesky().map(|c| c.solve(&-g)) else {
            break;
        };
        let (w, t) = (x.fixed_rows::<3>(0).into_owned(), x.fixed_rows::<3>(3).into_owned());
        let angle = w.norm();
        let step = if angle > 0.0 {
            RigidTransform::from_axis_angle(&(w / angle), angle, t)
        } else {
            RigidTransform::from_translation(t)
        };
        current = step.compose(&current);
        if t.norm() < cfg.translation_epsilon && angle < cfg.rotation_epsilon {
            converged = true;
            break;
        }
    }
    let (fitness, inlier_rmse) = evaluate_registration(src, tgt, &current, cfg.max_correspondence_distance)?;
    Ok(RegistrationResult {
        transform: current,
        fitness,
        inlier_rmse,
        iterations_used: iterations,
        converged,
        low_confidence: false,
        monotonic_violations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Three orthogonal walls, sampled densely: a well-constrained scene.
    fn corner_scene(rng: &mut impl Rng) -> PointCloud {
        let mut pts = Vec::new();
        for _ in 0..1500 {
            let (a, b) = (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0));
            pts.push([a, b, 0.0]);
            pts.push([a, 0.0, b * 0.5]);
            pts.push([0.0, a, b * 0.5]);
        }
        // a few boxes for extra structure
        for _ in 0..600 {
            let (a, b) = (rng.random_range(0.0..1.5), rng.random_range(0.0..1.5));
            pts.push([3.0 + a, 4.0, b]);
            pts.push([5.0, 2.0 + a, b]);
        }
        PointCloud::from_xyz(&pts, "s").unwrap()
    }

    fn cfg() -> IcpConfig {
        IcpConfig {
            max_correspondence_distance: 1.5,
            max_iterations: 200,
            translation_epsilon: 1e-7,
            rotation_epsilon: 1e-8,
        }
    }

    #[test]
    fn identical_clouds_stay_at_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let c = corner_scene(&mut rng);
        let idx = SpatialIndex::new(c.clone());
        let r = icp_refine(&c, &idx, &RigidTransform::identity(), &cfg()).unwrap();
        let (dt, dr) = r.transform.error_to(&RigidTransform::identity());
        assert!(dt < 1e-9 && dr < 1e-7);
        assert_eq!(r.fitness, 1.0);
        assert!(r.inlier_rmse < 1e-9);
        assert!(r.converged);
    }

    #[test]
    fn recovers_small_perturbation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let c = corner_scene(&mut rng);
        let truth = RigidTransform::from_euler(0.02, -0.03, 0.06, Vector3::new(0.3, -0.2, 0.1));
        let idx = SpatialIndex::new(c.transformed(&truth));
        let (r, trace) = icp_refine_traced(&c, &idx, &RigidTransform::identity(), &cfg()).unwrap();
        let (dt, dr) = r.transform.error_to(&truth);
        assert!(dt < 1e-3 && dr < 1e-3, "{dt} {dr}");
        assert!(trace.iter().all(IcpIteration::is_monotone));
        assert_eq!(r.monotonic_violations, 0);
    }

    #[test]
    fn point_to_plane_recovers_perturbation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let c = corner_scene(&mut rng);
        let truth = RigidTransform::from_euler(0.02, -0.03, 0.06, Vector3::new(0.4, -0.3, 0.1));
        let tgt = crate::geometry::estimate_normals(&c.transformed(&truth), 12).unwrap();
        let r = icp_point_to_plane(&c, &SpatialIndex::new(tgt), &RigidTransform::identity(), &cfg()).unwrap();
        let (dt, dr) = r.transform.error_to(&truth);
        assert!(dt < 1e-3 && dr < 1e-3, "{dt} {dr}");
        assert!(r.converged);
    }

    #[test]
    fn point_to_plane_needs_normals() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let c = corner_scene(&mut rng);
        let idx = SpatialIndex::new(c.clone());
        assert!(matches!(
            icp_point_to_plane(&c, &idx, &RigidTransform::identity(), &cfg()),
            Err(Error::MissingNormals)
        ));
    }

    #[test]
    fn disjoint_clouds_have_no_overlap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c = corner_scene(&mut rng);
        let far = c.transformed(&RigidTransform::from_translation(Vector3::new(100.0, 0.0, 0.0)));
        let idx = SpatialIndex::new(far);
        assert!(matches!(
            icp_refine(&c, &idx, &RigidTransform::identity(), &cfg()),
            Err(Error::NoOverlap { .. })
        ));
    }

    #[test]
    fn rmse_bounded_by_correspondence_distance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let c = corner_scene(&mut rng);
        let idx = SpatialIndex::new(c.transformed(&RigidTransform::from_translation(Vector3::new(0.5, 0.5, 0.0))));
        let r = icp_refine(&c, &idx, &RigidTransform::identity(), &IcpConfig { max_iterations: 2, ..cfg() }).unwrap();
        assert!(r.inlier_rmse <= cfg().max_correspondence_distance);
        assert!((0.0..=1.0).contains(&r.fitness));
    }
}
