use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::error::{invalid, Result};
use crate::geometry::{Point3, PointCloud, RigidTransform, Vector3};
use crate::par;

/// Spinning multi-channel LiDAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub channels: usize,
    /// Azimuth step (degrees).
    pub horizontal_resolution_deg: f64,
    /// Total vertical field of view, centered on the horizontal (degrees).
    pub vertical_fov_deg: f64,
    pub max_range: f64,
    pub min_range: f64,
    /// Gaussian range noise (m).
    pub range_noise_sigma: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            horizontal_resolution_deg: 0.4,
            vertical_fov_deg: 30.0,
            max_range: 50.0,
            min_range: 0.5,
            range_noise_sigma: 0.01,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !(self.max_range > 0.0) || !(self.horizontal_resolution_deg > 0.0) {
            return Err(invalid("LiDAR needs channels, a positive range and a positive azimuth step"));
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range) || !(self.range_noise_sigma >= 0.0) {
            return Err(invalid("invalid LiDAR range limits or noise"));
        }
        if !(self.vertical_fov_deg >= 0.0 && self.vertical_fov_deg < 180.0) {
            return Err(invalid("vertical field of view must lie in [0, 180)"));
        }
        Ok(())
    }

    /// Channel elevations (radians), bottom to top.
    pub fn elevations(&self) -> Vec<f64> {
        let half = self.vertical_fov_deg.to_radians() / 2.0;
        if self.channels == 1 {
            return vec![0.0];
        }
        let step = 2.0 * half / (self.channels - 1) as f64;
        (0..self.channels).map(|i| -half + i as f64 * step).collect()
    }

    /// Unit ray directions in the sensor frame, channel-major.
    pub fn directions(&self) -> Vec<Vector3> {
        let n_az = (360.0 / self.horizontal_resolution_deg).round().max(1.0) as usize;
        let step = std::f64::consts::TAU / n_az as f64;
        let mut dirs = Vec::with_capacity(n_az * self.channels);
        for e in self.elevations() {
            let (se, ce) = e.sin_cos();
            for k in 0..n_az {
                let (sa, ca) = (k as f64 * step).sin_cos();
                dirs.push(Vector3::new(ce * ca, ce * sa, se));
            }
        }
        dirs
    }
}

/// A LiDAR and where it sits on its carrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub mount_pose: RigidTransform,
    pub lidar: LidarConfig,
}

/// Ray-casts one sweep from `sensor_pose` (world) and returns the returns
/// in the sensor frame, with the sensor origin as viewpoint. Range noise is
/// drawn from `rng` in ray order.
pub fn simulate_scan<R: Rng + ?Sized>(scene: &Scene, sensor_pose: &RigidTransform, rig: &SensorRig, rng: &mut R) -> PointCloud {
    let lidar = &rig.lidar;
    let dirs = lidar.directions();
    let origin = sensor_pose.origin();
    let ranges: Vec<Option<f64>> = par::map_slice(&dirs, |d| {
        scene
            .cast(&origin, &sensor_pose.transform_vector(d), lidar.max_range)
            .filter(|&r| r >= lidar.min_range)
    });
    let mut pts = Vec::with_capacity(ranges.len());
    for (d, r) in dirs.iter().zip(ranges) {
        if let Some(r) = r {
            let noise: f64 = if lidar.range_noise_sigma > 0.0 {
                lidar.range_noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            pts.push(Point3::from(d * (r + noise)));
        }
    }
    PointCloud::from_parts(pts, None, "sensor".to_string(), vec![Point3::origin()])
}
