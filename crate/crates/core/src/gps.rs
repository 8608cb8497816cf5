//! GPS error model: multipath excess path, ionospheric group delay and
//! PDOP-amplified white noise, applied to ground-truth positions.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Point3, Vector3};

/// One reflected signal path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectedPath {
    /// Amplitude attenuation, in `(0, 1]`.
    pub attenuation: f64,
    /// Length of the reflected path (m).
    pub path_length: f64,
    /// Phase shift expressed as equivalent path length (m).
    pub phase_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipathParams {
    /// Length of the direct path (m).
    pub direct_path_length: f64,
    pub paths: Vec<ReflectedPath>,
}

impl MultipathParams {
    pub fn none() -> Self {
        Self {
            direct_path_length: 0.0,
            paths: Vec::new(),
        }
    }

    /// A single reflection with the given attenuation, excess length and
    /// phase term.
    pub fn single(attenuation: f64, excess: f64, phase_shift: f64) -> Self {
        Self {
            direct_path_length: 0.0,
            paths: vec![ReflectedPath {
                attenuation,
                path_length: excess,
                phase_shift,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.direct_path_length >= 0.0) {
            return Err(invalid("direct path length must be non-negative"));
        }
        for p in &self.paths {
            if !(p.attenuation > 0.0 && p.attenuation <= 1.0) {
                return Err(invalid(format!("multipath attenuation {} outside (0, 1]", p.attenuation)));
            }
            if !(p.path_length >= self.direct_path_length) || !p.phase_shift.is_finite() {
                return Err(invalid("reflected path shorter than the direct path"));
            }
        }
        Ok(())
    }
}

/// Range error from reflections: `sum_k a_k (d_k - d_0 + phi_k)` (m).
pub fn multipath_error(p: &MultipathParams) -> Result<f64> {
    p.validate()?;
    Ok(p.paths
        .iter()
        .map(|r| r.attenuation * (r.path_length - p.direct_path_length + r.phase_shift))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonoParams {
    /// Total electron content (TECU, 1e16 electrons / m^2).
    pub tec: f64,
    /// Carrier frequency (GHz).
    pub freq_ghz: f64,
}

impl IonoParams {
    pub const L1_GHZ: f64 = 1.57542;
}

/// Ionospheric group delay `40.3 TEC / f^2` in SI units, which for TECU and
/// GHz reduces to `0.403 * tec / freq^2` meters.
pub fn ionospheric_delay(p: &IonoParams) -> Result<f64> {
    if !(p.freq_ghz > 0.0) {
        return Err(invalid(format!("carrier frequency must be positive, got {}", p.freq_ghz)));
    }
    if !(p.tec >= 0.0) {
        return Err(invalid("TEC must be non-negative"));
    }
    Ok(0.403 * p.tec / (p.freq_ghz * p.freq_ghz))
}

/// Multipath override inside an axis-aligned ground rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipathZone {
    pub min_xy: [f64; 2],
    pub max_xy: [f64; 2],
    pub multipath: MultipathParams,
}

impl MultipathZone {
    pub fn contains(&self, p: &Point3) -> bool {
        (self.min_xy[0]..=self.max_xy[0]).contains(&p.x) && (self.min_xy[1]..=self.max_xy[1]).contains(&p.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsConfig {
    /// Per-axis white noise before PDOP scaling (m).
    pub base_noise_sigma: f64,
    pub pdop: f64,
    /// Multipath outside every zone.
    pub multipath: MultipathParams,
    /// First matching zone wins.
    #[serde(default)]
    pub zones: Vec<MultipathZone>,
    pub iono: IonoParams,
    /// Unit direction along which scalar range errors displace the fix.
    pub bias_direction: Vector3,
}

impl Default for GpsConfig {
    fn default() -> Self {
        Self {
            base_noise_sigma: 1.0,
            pdop: 1.0,
            multipath: MultipathParams::none(),
            zones: Vec::new(),
            iono: IonoParams {
                tec: 0.0,
                freq_ghz: IonoParams::L1_GHZ,
            },
            bias_direction: Vector3::x(),
        }
    }
}

impl GpsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pdop >= 1.0) {
            return Err(invalid(format!("PDOP must be >= 1, got {}", self.pdop)));
        }
        if !(self.base_noise_sigma >= 0.0) {
            return Err(invalid("GPS noise sigma must be non-negative"));
        }
        if (self.bias_direction.norm() - 1.0).abs() > 1e-6 {
            return Err(invalid("GPS bias direction must be a unit vector"));
        }
        self.multipath.validate()?;
        for z in &self.zones {
            z.multipath.validate()?;
        }
        ionospheric_delay(&self.iono).map(|_| ())
    }

    /// Multipath parameters in effect at `p`.
    pub fn multipath_at(&self, p: &Point3) -> &MultipathParams {
        self.zones
            .iter()
            .find(|z| z.contains(p))
            .map_or(&self.multipath, |z| &z.multipath)
    }
}

/// Error components of a fix (m). `noise` is the magnitude of the noise
/// vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub multipath: f64,
    pub iono: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub position: Point3,
    pub timestamp: f64,
    pub error_breakdown: ErrorBreakdown,
}

/// `truth + bias_direction * (multipath + iono) + pdop * sigma * N(0, I)`.
pub fn sample_gps_fix<R: Rng + ?Sized>(truth: &Point3, t: f64, cfg: &GpsConfig, rng: &mut R) -> Result<GpsFix> {
    cfg.validate()?;
    let mp = multipath_error(cfg.multipath_at(truth))?;
    let iono = ionospheric_delay(&cfg.iono)?;
    let draw = Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let noise = draw * (cfg.pdop * cfg.base_noise_sigma);
    Ok(GpsFix {
        position: truth + cfg.bias_direction * (mp + iono) + noise,
        timestamp: t,
        error_breakdown: ErrorBreakdown {
            multipath: mp,
            iono,
            noise: noise.norm(),
        },
    })
}

/// Writes fixes as CSV with columns `t,x,y,z,mp,iono,noise`.
pub fn write_gps_csv<W: Write>(fixes: &[GpsFix], mut w: W) -> Result<()> {
    writeln!(w, "t,x,y,z,mp,iono,noise")?;
    for f in fixes {
        let p = f.position;
        let e = f.error_breakdown;
        writeln!(
            w,
            "{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            f.timestamp, p.x, p.y, p.z, e.multipath, e.iono, e.noise
        )?;
    }
    Ok(())
}
