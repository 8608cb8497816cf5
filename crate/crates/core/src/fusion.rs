//! Cooperative reference map, registration validity gate and trajectory
//! fusion.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{voxel_downsample, PointCloud, RigidTransform};
use crate::gps::GpsFix;
use crate::registration::RegistrationResult;
use crate::Vector3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Infrastructure,
    Agent,
}

/// A scan from a sensor with known world pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooperativeScan {
    /// Points in the sensor frame.
    pub cloud: PointCloud,
    pub sensor_pose: RigidTransform,
    pub sensor_id: String,
    pub kind: SensorKind,
}

/// Merges cooperative scans into one world-frame cloud, downsampled to
/// `voxel`. Sensor origins become the cloud's viewpoints.
pub fn build_reference_map(scans: &[CooperativeScan], voxel: f64) -> Result<PointCloud> {
    if scans.is_empty() {
        return Err(Error::EmptyInput("reference map needs at least one scan"));
    }
    let mut merged = PointCloud::empty("world");
    let mut viewpoints = Vec::with_capacity(scans.len());
    for s in scans {
        merged.extend_from(&s.cloud.clone().without_normals().transformed(&s.sensor_pose));
        viewpoints.push(s.sensor_pose.origin());
    }
    let mut map = voxel_downsample(&merged, voxel)?.with_viewpoints(viewpoints);
    map.set_frame_id("world");
    Ok(map)
}

/// Registration quality of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameQuality {
    pub fitness: f64,
    pub rmse: f64,
}

impl From<&RegistrationResult> for FrameQuality {
    fn from(r: &RegistrationResult) -> Self {
        Self {
            fitness: r.fitness,
            rmse: r.inlier_rmse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Window width in frames (odd).
    pub window: usize,
    pub delta_f: f64,
    /// RMSE tolerance (m).
    pub delta_r: f64,
    /// Use only the current and previous `window / 2` frames instead of the
    /// centered window.
    pub causal: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            window: 11,
            delta_f: 0.05,
            delta_r: 0.02,
            causal: false,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(invalid(format!("gate window must be odd and positive, got {}", self.window)));
        }
        if !(self.delta_f >= 0.0 && self.delta_r >= 0.0) {
            return Err(invalid("gate tolerances must be non-negative"));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        self.window / 2
    }
}

/// Sliding-window extreme with a monotone deque; `better(a, b)` is true when
/// `a` should replace `b` as the window's extreme.
fn window_extreme(xs: &[f64], behind: usize, ahead: usize, better: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    let n = xs.len();
    let mut out = Vec::with_capacity(n);
    let mut dq: VecDeque<usize> = VecDeque::new();
    let mut next = 0;
    for i in 0..n {
        let hi = (i + ahead).min(n - 1);
        while next <= hi {
            while dq.back().is_some_and(|&b| better(xs[next], xs[b]) || xs[next] == xs[b]) {
                dq.pop_back();
            }
            dq.push_back(next);
            next += 1;
        }
        let lo = i.saturating_sub(behind);
        while dq.front().is_some_and(|&f| f < lo) {
            dq.pop_front();
        }
        out.push(xs[*dq.front().expect("window non-empty")]);
    }
    out
}

/// Per-frame `(f_env, r_env)`: the window maximum of fitness and minimum of
/// RMSE over `|j - i| <= window / 2` (or `i - window / 2 <= j <= i` when
/// causal), truncated at the sequence ends.
pub fn compute_envelopes(q: &[FrameQuality], cfg: &GateConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    if q.is_empty() {
        return Err(Error::EmptyInput("quality series"));
    }
    let h = cfg.half();
    let ahead = if cfg.causal { 0 } else { h };
    let f: Vec<f64> = q.iter().map(|x| x.fitness).collect();
    let r: Vec<f64> = q.iter().map(|x| x.rmse).collect();
    let f_env = window_extreme(&f, h, ahead, |a, b| a > b);
    let r_env = window_extreme(&r, h, ahead, |a, b| a < b);
    Ok(f_env.into_iter().zip(r_env).collect())
}

/// Accepts frame `i` iff `f_i >= f_env_i - delta_f` and `r_i <= r_env_i + delta_r`.
pub fn gate_frames(q: &[FrameQuality], cfg: &GateConfig) -> Result<Vec<bool>> {
    let env = compute_envelopes(q, cfg)?;
    Ok(q.iter()
        .zip(env)
        .map(|(x, (fe, re))| x.fitness >= fe - cfg.delta_f && x.rmse <= re + cfg.delta_r)
        .collect())
}

/// Cross-check of accepted registrations against odometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// Frames searched on each side for agreeing registrations.
    pub half_window: usize,
    /// Largest position disagreement (m) between two registrations once one
    /// is carried to the other's frame by the odometry motion.
    pub tolerance: f64,
    /// Agreeing registrations required besides the frame itself.
    pub min_support: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            half_window: 10,
            tolerance: 0.3,
            min_support: 2,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(invalid("consistency tolerance must be positive"));
        }
        if self.half_window == 0 && self.min_support > 0 {
            return Err(invalid("consistency window cannot supply the required support"));
        }
        Ok(())
    }
}

/// Keeps the candidate frames whose registration agrees with at least
/// `min_support` other candidates nearby. Odometry drifts slowly, so two
/// correct registrations differ by about the odometry motion between them.
/// A registration snapped onto repeated structure or a sparse map region
/// does not, even when its fitness looks normal.
pub fn consistent_frames(
    slam: &[RigidTransform],
    reg: &[Option<RegistrationResult>],
    candidates: &[bool],
    cfg: &ConsistencyConfig,
) -> Result<Vec<bool>> {
    cfg.validate()?;
    let n = slam.len();
    for (what, len) in [("registration results", reg.len()), ("candidate flags", candidates.len())] {
        if len != n {
            return Err(Error::LengthMismatch { what, left: n, right: len });
        }
    }
    let pose = |i: usize| reg[i].as_ref().filter(|_| candidates[i]).map(|r| r.transform);
    Ok((0..n)
        .map(|i| {
            let Some(pi) = pose(i) else {
                return false;
            };
            let lo = i.saturating_sub(cfg.half_window);
            let hi = (i + cfg.half_window).min(n - 1);
            let support = (lo..=hi)
                .filter(|&j| j != i)
                .filter_map(|j| pose(j).map(|pj| (j, pj)))
                .filter(|(j, pj)| {
                    let predicted = pi.compose(&slam[i].inverse()).compose(&slam[*j]);
                    (predicted.translation() - pj.translation()).norm() <= cfg.tolerance
                })
                .count();
            support >= cfg.min_support
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    Anchored,
    Propagated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFrame {
    pub pose: RigidTransform,
    pub source: PoseSource,
    pub valid: bool,
}

/// Fuses odometry with registration anchors.
///
/// Frames with `flags[i]` and a registration result take the registration
/// pose. Later frames follow the last anchor composed with the odometry
/// motion since it. Frames before the first anchor use odometry shifted by
/// the mean GPS-minus-odometry offset.
pub fn fuse_trajectory(
    slam: &[RigidTransform],
    reg: &[Option<RegistrationResult>],
    flags: &[bool],
    gps: &[GpsFix],
) -> Result<Vec<FusedFrame>> {
    let n = slam.len();
    for (what, len) in [("registration results", reg.len()), ("gate flags", flags.len()), ("GPS fixes", gps.len())] {
        if len != n {
            return Err(Error::LengthMismatch { what, left: n, right: len });
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let offset = slam
        .iter()
        .zip(gps)
        .fold(Vector3::zeros(), |acc, (s, g)| acc + (g.position - s.origin()))
        / n as f64;
    let gps_anchor = RigidTransform::from_translation(offset);

    let mut out = Vec::with_capacity(n);
    // world pose of the odometry frame implied by the latest anchor
    let mut correction = gps_anchor;
    for i in 0..n {
        let anchor = match (&reg[i], flags[i]) {
            (Some(r), true) => Some(r.transform),
            _ => None,
        };
        let frame = match anchor {
            Some(pose) => {
                correction = pose.compose(&slam[i].inverse());
                FusedFrame {
                    pose,
                    source: PoseSource::Anchored,
                    valid: true,
                }
            }
            None => FusedFrame {
                pose: correction.compose(&slam[i]),
                source: PoseSource::Propagated,
                valid: false,
            },
        };
        out.push(frame);
    }
    Ok(out)
}

/// Per-frame fusion log with columns
/// `t,valid,fitness,rmse,f_env,r_env,x,y,z`.
pub fn write_fusion_csv<W: Write>(
    times: &[f64],
    quality: &[Option<FrameQuality>],
    envelopes: &[(f64, f64)],
    fused: &[FusedFrame],
    mut w: W,
) -> Result<()> {
    writeln!(w, "t,valid,fitness,rmse,f_env,r_env,x,y,z")?;
    for i in 0..fused.len() {
        let (f, r) = quality[i].map_or((f64::NAN, f64::NAN), |q| (q.fitness, q.rmse));
        let (fe, re) = envelopes.get(i).copied().unwrap_or((f64::NAN, f64::NAN));
        let p = fused[i].pose.translation();
        writeln!(
            w,
            "{:.3},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            times[i], fused[i].valid as u8, f, r, fe, re, p.x, p.y, p.z
        )?;
    }
    Ok(())
}
