use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use super::{icp_refine_traced, ransac_coarse, IcpConfig, IcpIteration, RansacConfig, RegistrationResult};
use crate::descriptors::{compute_fpfh_subset, match_with_indices, CorrespondenceSet, DescriptorIndex, FpfhDescriptor, FpfhParams};
use crate::error::{invalid, Error, Result};
use crate::geometry::{estimate_normals_with_index, voxel_downsample, Matrix3, PointCloud, RigidTransform, SpatialIndex};
use crate::par;

/// One ICP pass at its own resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpStage {
    /// Voxel size both clouds are reduced to for this pass (m).
    pub voxel: f64,
    pub icp: IcpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Voxel size for normals, descriptors and RANSAC (m).
    pub voxel: f64,
    /// Neighbors per normal estimate.
    pub normal_k: usize,
    pub fpfh: FpfhParams,
    /// Keep only mutually nearest descriptor pairs, falling back to one-way
    /// matches when too few survive.
    pub mutual_filter: bool,
    pub ransac: RansacConfig,
    /// Refinement passes, coarse to fine. The last one defines the distance
    /// used for the reported fitness and RMSE.
    pub icp_stages: Vec<IcpStage>,
    /// Minimum eigenvalue of the mean normal outer product below which the
    /// source geometry is considered unable to pin down translation.
    pub degeneracy_threshold: f64,
    /// Final fitness below this marks the result low-confidence.
    pub min_fitness: f64,
    /// Points whose normal has `|n_z|` above this are not offered as
    /// descriptor matches (they still shape their neighbors' descriptors).
    /// Flat ground gives near-identical descriptors everywhere, which only
    /// adds outliers; `None` keeps every point.
    pub keypoint_max_normal_z: Option<f64>,
    pub seed: u64,
}

impl PipelineConfig {
    /// Defaults tied to the voxel size `v`.
    pub fn for_voxel(v: f64) -> Self {
        Self {
            voxel: v,
            normal_k: 20,
            fpfh: FpfhParams::new(5.0 * v),
            mutual_filter: true,
            ransac: RansacConfig {
                inlier_threshold: 1.5 * v,
                ..RansacConfig::default()
            },
            icp_stages: vec![
                IcpStage {
                    voxel: v,
                    icp: IcpConfig {
                        max_correspondence_distance: 1.5 * v,
                        max_iterations: 30,
                        translation_epsilon: 1e-4,
                        rotation_epsilon: 1e-5,
                    },
                },
                IcpStage {
                    voxel: 0.25 * v,
                    icp: IcpConfig {
                        max_correspondence_distance: 0.4 * v,
                        max_iterations: 40,
                        translation_epsilon: 1e-5,
                        rotation_epsilon: 1e-6,
                    },
                },
            ],
            degeneracy_threshold: 0.02,
            min_fitness: 0.1,
            keypoint_max_normal_z: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel > 0.0) {
            return Err(invalid("registration voxel size must be positive"));
        }
        if self.normal_k < 3 {
            return Err(invalid("normal estimation needs at least 3 neighbors"));
        }
        if self.keypoint_max_normal_z.is_some_and(|z| !(0.0..=1.0).contains(&z)) {
            return Err(invalid("keypoint normal cutoff must lie in [0, 1]"));
        }
        if self.icp_stages.is_empty() {
            return Err(invalid("at least one ICP stage is required"));
        }
        for s in &self.icp_stages {
            if !(s.voxel > 0.0) {
                return Err(invalid("ICP stage voxel size must be positive"));
            }
            s.icp.validate()?;
        }
        self.ransac.validate()
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_voxel(1.0)
    }
}

/// A cloud reduced, described and indexed for registration. Building one is
/// the expensive part of [`register`]; reuse it when the same cloud meets
/// several partners.
pub struct PreparedCloud {
    coarse: PointCloud,
    /// Indices into `coarse` of the points offered for matching.
    keypoints: Vec<usize>,
    /// Descriptors of the keypoints, in keypoint order.
    features: Vec<FpfhDescriptor>,
    feature_index: DescriptorIndex,
    stages: Vec<SpatialIndex>,
}

impl PreparedCloud {
    pub fn new(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if cloud.is_empty() {
            return Err(Error::EmptyInput("registration cloud"));
        }
        let bare = cloud.clone().without_normals();
        let down = voxel_downsample(&bare, cfg.voxel)?;
        if down.len() < cfg.normal_k.max(cfg.ransac.sample_size) {
            return Err(Error::InsufficientPoints {
                needed: cfg.normal_k.max(cfg.ransac.sample_size),
                got: down.len(),
            });
        }
        let (described, stages) = par::join(
            || -> Result<_> {
                let index = SpatialIndex::new(down.clone());
                let coarse = estimate_normals_with_index(&down, &index, cfg.normal_k)?;
                let normals = coarse.normals().expect("normals were just estimated");
                let keypoints: Vec<usize> = (0..coarse.len())
                    .filter(|&i| cfg.keypoint_max_normal_z.is_none_or(|z| normals[i].z.abs() <= z))
                    .collect();
                let features = compute_fpfh_subset(&coarse, &index, &cfg.fpfh, &keypoints)?;
                let feature_index = DescriptorIndex::new(&features);
                Ok((coarse, keypoints, features, feature_index))
            },
            || -> Result<Vec<SpatialIndex>> {
                cfg.icp_stages
                    .iter()
                    .map(|s| {
                        Ok(SpatialIndex::new(if s.voxel == cfg.voxel {
                            down.clone()
                        } else {
                            voxel_downsample(&bare, s.voxel)?
                        }))
                    })
                    .collect()
            },
        );
        let (coarse, keypoints, features, feature_index) = described?;
        Ok(Self {
            coarse,
            keypoints,
            features,
            feature_index,
            stages: stages?,
        })
    }

    /// Downsampled cloud with normals used for the coarse stage.
    pub fn coarse(&self) -> &PointCloud {
        &self.coarse
    }

    /// Descriptors of the match candidates, aligned with [`Self::keypoints`].
    pub fn features(&self) -> &[FpfhDescriptor] {
        &self.features
    }

    /// Indices into [`Self::coarse`] of the match candidates.
    pub fn keypoints(&self) -> &[usize] {
        &self.keypoints
    }

    /// Cloud and index used by ICP stage `i`.
    pub fn stage(&self, i: usize) -> &SpatialIndex {
        &self.stages[i]
    }

    /// Smallest eigenvalue of the mean `n n^T` over the coarse normals. Near
    /// zero when some translation direction is unconstrained by the surfaces.
    pub fn constraint_strength(&self) -> f64 {
        let normals = self.coarse.normals().expect("prepared clouds carry normals");
        let m = normals.iter().fold(Matrix3::zeros(), |acc, n| acc + n * n.transpose()) / normals.len() as f64;
        SymmetricEigen::new(m).eigenvalues.min()
    }
}

/// Registration with a fixed configuration over prepared clouds.
pub struct Registrar {
    cfg: PipelineConfig,
}

/// Full outcome of one registration, including the coarse stage and the
/// ICP objective trace of every stage.
#[derive(Debug, Clone)]
pub struct RegistrationReport {
    pub result: RegistrationResult,
    pub coarse: RegistrationResult,
    pub correspondences: usize,
    pub icp_trace: Vec<IcpIteration>,
}

impl Registrar {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<PreparedCloud> {
        PreparedCloud::new(cloud, &self.cfg)
    }

    /// Descriptor matches as index pairs into the coarse clouds.
    fn correspondences(&self, src: &PreparedCloud, tgt: &PreparedCloud) -> Result<CorrespondenceSet> {
        let forward = || match_with_indices(&src.features, &tgt.features, &tgt.feature_index, None);
        let mut set = if self.cfg.mutual_filter {
            let mutual = match_with_indices(&src.features, &tgt.features, &tgt.feature_index, Some(&src.feature_index))?;
            if mutual.len() >= self.cfg.ransac.min_inliers.max(self.cfg.ransac.sample_size) * 2 {
                mutual
            } else {
                forward()?
            }
        } else {
            forward()?
        };
        for pair in &mut set.pairs {
            *pair = (src.keypoints[pair.0], tgt.keypoints[pair.1]);
        }
        Ok(set)
    }

    /// Transform taking `src` onto `tgt`.
    pub fn register(&self, src: &PreparedCloud, tgt: &PreparedCloud) -> Result<RegistrationResult> {
        self.register_traced(src, tgt).map(|r| r.result)
    }

    pub fn register_traced(&self, src: &PreparedCloud, tgt: &PreparedCloud) -> Result<RegistrationReport> {
        self.register_traced_seeded(src, tgt, self.cfg.seed)
    }

    /// As [`Registrar::register`] with the RANSAC seed overridden, so that
    /// one registrar can serve many independently seeded registrations.
    pub fn register_seeded(&self, src: &PreparedCloud, tgt: &PreparedCloud, seed: u64) -> Result<RegistrationResult> {
        self.register_traced_seeded(src, tgt, seed).map(|r| r.result)
    }

    pub fn register_traced_seeded(&self, src: &PreparedCloud, tgt: &PreparedCloud, seed: u64) -> Result<RegistrationReport> {
        let corr = self.correspondences(src, tgt)?;
        let coarse = if corr.len() >= self.cfg.ransac.sample_size {
            ransac_coarse(&src.coarse, &tgt.coarse, &corr, &self.cfg.ransac, seed)?
        } else {
            RegistrationResult {
                transform: RigidTransform::identity(),
                fitness: 0.0,
                inlier_rmse: 0.0,
                iterations_used: 0,
                converged: false,
                low_confidence: true,
                monotonic_violations: 0,
            }
        };
        let mut current = if coarse.converged {
            coarse.transform
        } else {
            RigidTransform::identity()
        };

        let mut trace = Vec::new();
        let mut last = None;
        for (i, stage) in self.cfg.icp_stages.iter().enumerate() {
            let (r, t) = icp_refine_traced(src.stage(i).cloud(), tgt.stage(i), &current, &stage.icp)?;
            current = r.transform;
            trace.extend(t);
            last = Some(r);
        }
        let mut result = last.expect("at least one stage");
        result.iterations_used = trace.len();
        result.monotonic_violations = trace.iter().filter(|s| !s.is_monotone()).count();
        result.low_confidence = !coarse.converged
            || result.fitness < self.cfg.min_fitness
            || src.constraint_strength() < self.cfg.degeneracy_threshold;
        Ok(RegistrationReport {
            result,
            coarse,
            correspondences: corr.len(),
            icp_trace: trace,
        })
    }
}

/// Registers `src` onto `tgt`: downsample, normals, FPFH, matching, RANSAC,
/// then the configured ICP stages. A failed coarse stage falls back to ICP
/// from identity with the result marked low-confidence.
pub fn register(src: &PointCloud, tgt: &PointCloud, cfg: &PipelineConfig) -> Result<RegistrationResult> {
    let registrar = Registrar::new(cfg.clone())?;
    let (s, t) = par::join(|| registrar.prepare(src), || registrar.prepare(tgt));
    registrar.register(&s?, &t?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vector3;
    use rand::{Rng, SeedableRng};

    /// Ground with a few boxes of different sizes, sampled on their faces.
    fn structured_scene() -> PointCloud {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut pts = Vec::new();
        for _ in 0..6000 {
            pts.push([rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 0.0]);
        }
        let boxes = [
            ([-12.0, -8.0, 0.0], [-6.0, -2.0, 6.0]),
            ([4.0, 5.0, 0.0], [9.0, 14.0, 3.0]),
            ([-3.0, 8.0, 0.0], [-1.0, 10.0, 9.0]),
            ([10.0, -15.0, 0.0], [16.0, -11.0, 4.5]),
        ];
        for (lo, hi) in boxes {
            for _ in 0..2500 {
                let mut p = [
                    rng.random_range(lo[0]..hi[0]),
                    rng.random_range(lo[1]..hi[1]),
                    rng.random_range(lo[2]..hi[2]),
                ];
                let axis = rng.random_range(0..3);
                p[axis] = if rng.random::<bool>() { lo[axis] } else { hi[axis] };
                if p[2] > 0.0 {
                    pts.push(p);
                }
            }
        }
        PointCloud::from_xyz(&pts, "scene").unwrap()
    }

    #[test]
    fn self_registration_is_identity() {
        let c = structured_scene();
        let r = register(&c, &c, &PipelineConfig::for_voxel(0.8)).unwrap();
        let (dt, dr) = r.transform.error_to(&RigidTransform::identity());
        assert!(dt < 0.01 && dr < 0.01, "{dt} {dr}");
        assert!(r.fitness >= 0.99);
        assert!(!r.low_confidence);
    }

    #[test]
    fn recovers_large_known_transform() {
        let c = structured_scene();
        let truth = RigidTransform::from_euler(0.05, -0.03, 1.2, Vector3::new(6.0, -4.0, 0.5));
        let tgt = c.transformed(&truth);
        let r = register(&c, &tgt, &PipelineConfig::for_voxel(0.8)).unwrap();
        let (dt, dr) = r.transform.error_to(&truth);
        assert!(dt < 0.05 && dr < 1f64.to_radians(), "{dt} {dr}");
        assert_eq!(r.monotonic_violations, 0);
    }

    #[test]
    fn sliding_plane_is_low_confidence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..4000)
            .map(|_| [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), 0.0])
            .collect();
        let c = PointCloud::from_xyz(&pts, "plane").unwrap();
        let shifted = c.transformed(&RigidTransform::from_translation(Vector3::new(2.0, 1.0, 0.0)));
        let r = register(&c, &shifted, &PipelineConfig::for_voxel(1.0)).unwrap();
        assert!(r.low_confidence);
    }

    #[test]
    fn deterministic_for_seed() {
        let c = structured_scene();
        let tgt = c.transformed(&RigidTransform::from_yaw(0.7, Vector3::new(3.0, 1.0, 0.0)));
        let cfg = PipelineConfig::for_voxel(0.8);
        assert_eq!(register(&c, &tgt, &cfg).unwrap(), register(&c, &tgt, &cfg).unwrap());
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = PipelineConfig::for_voxel(1.2);
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert!(PipelineConfig { icp_stages: vec![], ..cfg.clone() }.validate().is_err());
        assert!(PipelineConfig { voxel: 0.0, ..cfg }.validate().is_err());
    }
}
