//! Two-stage registration: RANSAC over FPFH correspondences for a coarse
//! pose, point-to-point ICP for refinement, and the fitness / inlier-RMSE
//! quality measures.

mod icp;
mod kabsch;
mod pipeline;
mod ransac;

pub use icp::{icp_point_to_plane, icp_refine, icp_refine_traced, IcpIteration};
pub use kabsch::{alignment_objective, best_rigid_transform, fit_rigid};
pub(crate) use kabsch::fit_unchecked;
pub use pipeline::{register, IcpStage, PipelineConfig, PreparedCloud, Registrar, RegistrationReport};
pub use ransac::ransac_coarse;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{PointCloud, RigidTransform, SpatialIndex};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Correspondences per hypothesis, 3 or 4.
    pub sample_size: usize,
    pub max_iterations: usize,
    /// Residual (m) below which a correspondence supports a hypothesis.
    pub inlier_threshold: f64,
    /// Target probability of drawing one all-inlier sample; drives early exit.
    pub confidence: f64,
    /// Minimum ratio between corresponding edge lengths in a sample.
    pub edge_length_check_ratio: f64,
    /// Hypotheses with fewer supporting correspondences count as having none.
    pub min_inliers: usize,
    /// Rejects hypotheses rotating the source by more than this (degrees).
    /// Useful when the source is already roughly oriented.
    #[serde(default)]
    pub max_rotation_deg: Option<f64>,
    /// Rejects hypotheses translating the source by more than this (m).
    #[serde(default)]
    pub max_translation: Option<f64>,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            sample_size: 3,
            max_iterations: 100_000,
            inlier_threshold: 1.5,
            confidence: 0.999,
            edge_length_check_ratio: 0.9,
            min_inliers: 6,
            max_rotation_deg: None,
            max_translation: None,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_size == 3 || self.sample_size == 4) {
            return Err(invalid(format!("RANSAC sample size must be 3 or 4, got {}", self.sample_size)));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(invalid("RANSAC inlier threshold must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(invalid("RANSAC confidence must lie in (0, 1)"));
        }
        if !(self.edge_length_check_ratio > 0.0 && self.edge_length_check_ratio <= 1.0) {
            return Err(invalid("edge length check ratio must lie in (0, 1]"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("RANSAC needs at least one iteration"));
        }
        if self.max_rotation_deg.is_some_and(|r| !(r > 0.0)) || self.max_translation.is_some_and(|t| !(t > 0.0)) {
            return Err(invalid("RANSAC hypothesis bounds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the per-iteration translation change (m).
    pub translation_epsilon: f64,
    /// Convergence threshold on the per-iteration rotation change (rad).
    pub rotation_epsilon: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_correspondence_distance: 1.0,
            max_iterations: 50,
            translation_epsilon: 1e-5,
            rotation_epsilon: 1e-6,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_correspondence_distance > 0.0
            && self.translation_epsilon > 0.0
            && self.rotation_epsilon > 0.0
            && self.max_iterations > 0)
        {
            return Err(invalid("ICP parameters must all be positive"));
        }
        Ok(())
    }
}

/// Estimated transform with its quality measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Inlier ratio in `[0, 1]`.
    pub fitness: f64,
    /// RMS inlier distance (m).
    pub inlier_rmse: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Set when the coarse stage failed or the geometry leaves a direction
    /// unconstrained; such poses should not be trusted without gating.
    #[serde(default)]
    pub low_confidence: bool,
    /// ICP iterations whose objective increased over their own
    /// correspondence set. Always zero for a correct solver.
    #[serde(default)]
    pub monotonic_violations: usize,
}

/// Fitness and inlier RMSE of `t` applied to `src`, with inliers being
/// points whose nearest target neighbor is closer than `dist`.
pub fn evaluate_registration(src: &PointCloud, tgt: &SpatialIndex, t: &RigidTransform, dist: f64) -> Result<(f64, f64)> {
    if src.is_empty() {
        return Err(Error::EmptyInput("source cloud"));
    }
    if !(dist > 0.0) {
        return Err(invalid("evaluation distance must be positive"));
    }
    if tgt.is_empty() {
        return Ok((0.0, 0.0));
    }
    let max_d2 = dist * dist;
    let d2s = par::map_slice(src.points(), |p| tgt.nearest_within_squared(&t.transform_point(p), max_d2).map(|(_, d2)| d2));
    let (count, sum) = d2s.iter().flatten().fold((0usize, 0.0), |(c, s), d2| (c + 1, s + d2));
    if count == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((count as f64 / src.len() as f64, (sum / count as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vector3;
    use proptest::prelude::*;

    fn grid() -> PointCloud {
        let pts: Vec<[f64; 3]> = (0..10)
            .flat_map(|i| (0..10).map(move |j| [i as f64, j as f64, ((i * j) % 3) as f64 * 0.5]))
            .collect();
        PointCloud::from_xyz(&pts, "s").unwrap()
    }

    #[test]
    fn perfect_overlap() {
        let c = grid();
        let idx = SpatialIndex::new(c.clone());
        assert_eq!(evaluate_registration(&c, &idx, &RigidTransform::identity(), 0.3).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn shifted_beyond_distance_has_no_inliers() {
        let c = grid();
        let dist = 0.1;
        let shifted = c.transformed(&RigidTransform::from_translation(Vector3::new(0.0, 0.0, 2.0 * dist + 10.0)));
        let idx = SpatialIndex::new(shifted);
        assert_eq!(evaluate_registration(&c, &idx, &RigidTransform::identity(), dist).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn half_shifted() {
        // two source points sit 0.03 and 0.04 m from the target, two are far away
        let tgt = PointCloud::from_xyz(&[[0.0; 3], [10.0, 0.0, 0.0]], "t").unwrap();
        let src = PointCloud::from_xyz(
            &[[0.03, 0.0, 0.0], [10.0, 0.04, 0.0], [0.0, 5.0, 0.0], [10.0, 0.0, 7.0]],
            "s",
        )
        .unwrap();
        let (f, r) = evaluate_registration(&src, &SpatialIndex::new(tgt), &RigidTransform::identity(), 0.5).unwrap();
        assert_eq!(f, 0.5);
        let expected = ((0.03f64.powi(2) + 0.04f64.powi(2)) / 2.0).sqrt();
        assert!((r - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_source_is_error() {
        let idx = SpatialIndex::new(grid());
        assert!(matches!(
            evaluate_registration(&PointCloud::empty("s"), &idx, &RigidTransform::identity(), 1.0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(RansacConfig::default().validate().is_ok());
        assert!(RansacConfig { sample_size: 5, ..Default::default() }.validate().is_err());
        assert!(RansacConfig { confidence: 1.0, ..Default::default() }.validate().is_err());
        assert!(IcpConfig { max_iterations: 0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn metrics_stay_in_bounds(
            src in prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), 1..60),
            tgt in prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), 1..60),
            dist in 0.01..3.0f64,
        ) {
            let s = PointCloud::from_xyz(&src, "s").unwrap();
            let idx = SpatialIndex::new(PointCloud::from_xyz(&tgt, "t").unwrap());
            let (f, r) = evaluate_registration(&s, &idx, &RigidTransform::identity(), dist).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(r >= 0.0 && r <= dist);
        }
    }
}
