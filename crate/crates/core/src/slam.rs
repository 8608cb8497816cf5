//! Scan-to-local-map LiDAR odometry.
//!
//! Each scan is aligned by ICP against a sliding voxel map of previous scans,
//! starting from a motion prior; the aligned scan is then merged into the
//! map. There is no loop closure, so the estimate drifts.

use std::collections::{BTreeMap, HashSet};

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{voxel_key, Matrix3, Point3, PointCloud, RigidTransform, SpatialIndex, Vector3, VoxelKey};
use crate::par;
use crate::registration::{icp_point_to_plane, IcpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    ConstantVelocity,
    GroundTruthPerturbed,
}

/// Predicted motion since the previous frame, in the previous sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryPrior {
    pub delta: RigidTransform,
    pub source: PriorSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    /// Scan and map voxel size (m).
    pub voxel: f64,
    /// Maximum number of map voxels; oldest insertions are evicted first.
    pub map_cap: usize,
    /// ICP passes run in order, each starting from the previous result.
    /// A wide first pass catches motion the prior missed.
    pub icp_stages: Vec<IcpConfig>,
    /// Per-point Gaussian jitter applied to scans before matching (m).
    pub scan_jitter_sigma: f64,
    pub prior: PriorSource,
}

impl Default for SlamConfig {
    fn default() -> Self {
        let icp = |max_correspondence_distance, max_iterations| IcpConfig {
            max_correspondence_distance,
            max_iterations,
            translation_epsilon: 1e-4,
            rotation_epsilon: 1e-5,
        };
        Self {
            voxel: 0.5,
            map_cap: 200_000,
            icp_stages: vec![icp(2.0, 30), icp(0.6, 30)],
            scan_jitter_sigma: 0.0,
            prior: PriorSource::ConstantVelocity,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel > 0.0) || self.map_cap == 0 || !(self.scan_jitter_sigma >= 0.0) {
            return Err(invalid("SLAM voxel, map cap and jitter must be positive"));
        }
        if self.icp_stages.is_empty() {
            return Err(invalid("SLAM needs at least one ICP stage"));
        }
        self.icp_stages.iter().try_for_each(IcpConfig::validate)
    }
}

/// Keeps the first point falling in each voxel, in input order. Unlike
/// centroids, the survivors do not snap toward cell centers, so two scans of
/// the same surface do not share a lattice that favors zero motion.
pub fn first_point_per_voxel(points: &[Point3], voxel: f64) -> Vec<Point3> {
    let mut seen = HashSet::with_capacity(points.len());
    points.iter().filter(|p| seen.insert(voxel_key(p, voxel))).copied().collect()
}

#[derive(Debug, Clone)]
struct MapCell {
    point: Point3,
    normal: Option<Vector3>,
    /// Normal estimates tried so far; cells give up after a few.
    attempts: u8,
    inserted: usize,
}

/// Neighbors and search radius (in voxels) for map normals.
const NORMAL_NEIGHBORS: usize = 12;
const NORMAL_RADIUS_VOXELS: f64 = 3.0;
const NORMAL_ATTEMPTS: u8 = 3;

/// Unit normal of a neighborhood that is spread over a plane: rejects
/// collinear sets (a single LiDAR ring) and volumetric clutter.
fn plane_normal(points: &[Point3], ids: &[usize]) -> Option<Vector3> {
    if ids.len() < 6 {
        return None;
    }
    let n = ids.len() as f64;
    let mean = ids.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i].coords) / n;
    let cov = ids.iter().fold(Matrix3::zeros(), |acc, &i| {
        let d = points[i].coords - mean;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let [l0, l1, l2] = order.map(|i| eig.eigenvalues[i]);
    (l1 >= 0.05 * l2 && l0 <= 0.25 * l1).then(|| eig.eigenvectors.column(order[0]).normalize())
}

/// Voxel map holding one point per occupied cell (the first one seen) and,
/// once its neighborhood allows, a surface normal.
#[derive(Debug, Clone)]
pub struct LocalMap {
    voxel: f64,
    cap: usize,
    cells: BTreeMap<VoxelKey, MapCell>,
}

impl LocalMap {
    pub fn new(voxel: f64, cap: usize) -> Self {
        Self {
            voxel,
            cap,
            cells: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Adds points (already in the map frame) tagged with frame `frame`.
    /// Occupied cells are left untouched.
    pub fn insert(&mut self, points: &[Point3], frame: usize) {
        for p in points {
            self.cells.entry(voxel_key(p, self.voxel)).or_insert(MapCell {
                point: *p,
                normal: None,
                attempts: 0,
                inserted: frame,
            });
        }
        if self.cells.len() > self.cap {
            let mut by_age: Vec<(usize, VoxelKey)> = self.cells.iter().map(|(k, c)| (c.inserted, *k)).collect();
            by_age.sort_unstable();
            let excess = self.cells.len() - self.cap;
            for (_, k) in &by_age[..excess] {
                self.cells.remove(k);
            }
        }
    }

    /// Estimates normals for cells still lacking one.
    fn refresh_normals(&mut self) {
        let points: Vec<Point3> = self.cells.values().map(|c| c.point).collect();
        let pending: Vec<usize> = self
            .cells
            .values()
            .enumerate()
            .filter(|(_, c)| c.normal.is_none() && c.attempts < NORMAL_ATTEMPTS)
            .map(|(i, _)| i)
            .collect();
        if pending.is_empty() {
            return;
        }
        let index = SpatialIndex::new(PointCloud::from_parts(points.clone(), None, "odom".to_string(), Vec::new()));
        let radius = NORMAL_RADIUS_VOXELS * self.voxel;
        let normals = par::map_slice(&pending, |&i| {
            let ids: Vec<usize> = index.knn_within(&points[i], NORMAL_NEIGHBORS, radius).iter().map(|n| n.id).collect();
            plane_normal(&points, &ids)
        });
        let mut next = pending.iter().zip(normals).peekable();
        for (i, cell) in self.cells.values_mut().enumerate() {
            if let Some((_, normal)) = next.next_if(|(&j, _)| j == i) {
                cell.normal = normal;
                cell.attempts += 1;
            }
        }
    }

    pub fn cloud(&self) -> PointCloud {
        let pts = self.cells.values().map(|c| c.point).collect();
        PointCloud::from_parts(pts, None, "odom".to_string(), Vec::new())
    }

    /// Every cell with its normal; cells without one carry the zero vector,
    /// which point-to-plane ICP ignores.
    pub fn surfels(&self) -> PointCloud {
        let (pts, normals): (Vec<Point3>, Vec<Vector3>) = self
            .cells
            .values()
            .map(|c| (c.point, c.normal.unwrap_or_else(Vector3::zeros)))
            .unzip();
        PointCloud::from_parts(pts, Some(normals), "odom".to_string(), Vec::new())
    }
}

/// Odometry state: sensor poses in the odometry frame (the first sensor
/// pose is the identity) and the local map.
#[derive(Debug, Clone)]
pub struct SlamState {
    pub trajectory: Vec<RigidTransform>,
    /// Refined frame-to-frame motion; `deltas[i]` leads from pose `i` to `i + 1`.
    pub deltas: Vec<RigidTransform>,
    /// Frames whose ICP failed and fell back to the prior.
    pub low_confidence: Vec<bool>,
    pub local_map: LocalMap,
    pub last_scan: PointCloud,
    pub observations: usize,
}

impl SlamState {
    pub fn new(cfg: &SlamConfig) -> Self {
        Self {
            trajectory: Vec::new(),
            deltas: Vec::new(),
            low_confidence: Vec::new(),
            local_map: LocalMap::new(cfg.voxel, cfg.map_cap),
            last_scan: PointCloud::empty("sensor"),
            observations: 0,
        }
    }

    /// Prior repeating the last refined motion (identity at start).
    pub fn constant_velocity_prior(&self) -> OdometryPrior {
        OdometryPrior {
            delta: self.deltas.last().copied().unwrap_or_default(),
            source: PriorSource::ConstantVelocity,
        }
    }
}

/// Adds independent Gaussian noise of `sigma` to every coordinate.
pub fn perturb_scan<R: Rng + ?Sized>(scan: &PointCloud, sigma: f64, rng: &mut R) -> PointCloud {
    if sigma <= 0.0 {
        return scan.clone();
    }
    let pts = scan
        .points()
        .iter()
        .map(|p| {
            let n = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            p + n * sigma
        })
        .collect();
    PointCloud::from_parts(pts, None, scan.frame_id().to_string(), scan.viewpoints().to_vec())
}

/// Processes one scan (sensor frame).
pub fn slam_step(mut state: SlamState, scan: &PointCloud, prior: &OdometryPrior, cfg: &SlamConfig) -> Result<SlamState> {
    cfg.validate()?;
    if scan.is_empty() {
        return Err(Error::EmptyInput("SLAM scan"));
    }
    let down = PointCloud::from_parts(
        first_point_per_voxel(scan.points(), cfg.voxel),
        None,
        scan.frame_id().to_string(),
        scan.viewpoints().to_vec(),
    );
    let frame = state.observations;
    let pose = match state.trajectory.last().copied() {
        None => {
            state.low_confidence.push(false);
            RigidTransform::identity()
        }
        Some(prev) => {
            let init = prev.compose(&prior.delta);
            let map = SpatialIndex::new(state.local_map.surfels());
            let mut refined = Some(init);
            for stage in &cfg.icp_stages {
                let Some(current) = refined else { break };
                refined = match icp_point_to_plane(&down, &map, &current, stage) {
                    Ok(r) => Some(r.transform),
                    Err(Error::NoOverlap { .. }) => None,
                    Err(e) => return Err(e),
                };
            }
            let (delta, failed) = match refined {
                Some(pose) => (prev.inverse().compose(&pose), false),
                None => (prior.delta, true),
            };
            state.deltas.push(delta);
            state.low_confidence.push(failed);
            prev.compose(&delta)
        }
    };
    let in_map: Vec<Point3> = down.points().iter().map(|p| pose.transform_point(p)).collect();
    state.local_map.insert(&in_map, frame);
    state.local_map.refresh_normals();
    state.trajectory.push(pose);
    state.last_scan = down;
    state.observations += 1;
    Ok(state)
}

/// Odometry poses mapped into the world by `anchor` (world pose of the
/// odometry origin).
pub fn slam_trajectory_in_world(state: &SlamState, anchor: &RigidTransform) -> Vec<RigidTransform> {
    state.trajectory.iter().map(|p| anchor.compose(p)).collect()
}
