//! Trajectory error metrics, per-cell runs, the scenario sweep and its
//! output formats.

mod pipeline;
mod report;

pub use pipeline::{run_cell, run_scenario_cells, run_sweep, run_sweep_detailed, CellRun, FrameLog, SweepResult, SweepRow};
pub use report::{write_frame_errors_csv, write_sweep_csv, write_sweep_json, write_sweep_table, OutputFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedFrame;
use crate::geometry::{Point3, RigidTransform};
use crate::gps::GpsFix;
use crate::registration::{fit_unchecked, RegistrationResult};

/// Mean Euclidean distance between paired positions, optionally after the
/// least-squares rigid alignment of `est` onto `gt`.
pub fn mean_trajectory_error(est: &[Point3], gt: &[Point3], align: bool) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "estimated vs ground-truth trajectory",
            left: est.len(),
            right: gt.len(),
        });
    }
    if est.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let t = if align {
        fit_unchecked(est, gt)
    } else {
        RigidTransform::identity()
    };
    Ok(est.iter().zip(gt).map(|(e, g)| (t.transform_point(e) - g).norm()).sum::<f64>() / est.len() as f64)
}

/// Mean positional errors (m) per method. `None` marks a column with no
/// frames to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub slam: f64,
    pub gps: f64,
    pub reg: Option<f64>,
    pub reg_valid: Option<f64>,
    pub fused: f64,
    pub fused_valid: Option<f64>,
    pub frames_total: usize,
    pub frames_registered: usize,
    pub frames_valid: usize,
}

/// Per-frame series of one run, all in the world frame.
pub struct RunTrajectories<'a> {
    pub gt: &'a [RigidTransform],
    pub gps: &'a [GpsFix],
    pub slam: &'a [RigidTransform],
    pub reg: &'a [Option<RegistrationResult>],
    /// Gate outcome per frame.
    pub valid: &'a [bool],
    /// Fusion anchored on every registration.
    pub fused: &'a [FusedFrame],
    /// Fusion anchored on valid frames only.
    pub fused_valid: &'a [FusedFrame],
}

fn positions(poses: impl Iterator<Item = RigidTransform>) -> Vec<Point3> {
    poses.map(|p| p.origin()).collect()
}

/// Mean error over the frames selected by `keep`, or `None` if none are.
fn subset_error(est: &[Point3], gt: &[Point3], keep: &[bool], align: bool) -> Result<Option<f64>> {
    let (e, g): (Vec<Point3>, Vec<Point3>) = est
        .iter()
        .zip(gt)
        .zip(keep)
        .filter_map(|(pair, &k)| k.then_some((*pair.0, *pair.1)))
        .unzip();
    if e.is_empty() {
        return Ok(None);
    }
    mean_trajectory_error(&e, &g, align).map(Some)
}

/// The six error columns. Valid columns restrict both estimate and ground
/// truth to frames that passed the gate.
pub fn evaluate_run(run: &RunTrajectories<'_>, align: bool) -> Result<ErrorReport> {
    let n = run.gt.len();
    for (what, len) in [
        ("GPS fixes", run.gps.len()),
        ("SLAM poses", run.slam.len()),
        ("registration results", run.reg.len()),
        ("gate flags", run.valid.len()),
        ("fused poses", run.fused.len()),
        ("valid-fused poses", run.fused_valid.len()),
    ] {
        if len != n {
            return Err(Error::LengthMismatch { what, left: n, right: len });
        }
    }
    let gt = positions(run.gt.iter().copied());
    let gps: Vec<Point3> = run.gps.iter().map(|f| f.position).collect();
    let slam = positions(run.slam.iter().copied());
    let registered: Vec<bool> = run.reg.iter().map(Option::is_some).collect();
    let valid: Vec<bool> = run.valid.iter().zip(&registered).map(|(v, r)| *v && *r).collect();
    let reg = positions(run.reg.iter().zip(run.gt).map(|(r, g)| r.as_ref().map_or(*g, |r| r.transform)));
    let fused = positions(run.fused.iter().map(|f| f.pose));
    let fused_valid = positions(run.fused_valid.iter().map(|f| f.pose));
    Ok(ErrorReport {
        slam: mean_trajectory_error(&slam, &gt, align)?,
        gps: mean_trajectory_error(&gps, &gt, align)?,
        reg: subset_error(&reg, &gt, &registered, align)?,
        reg_valid: subset_error(&reg, &gt, &valid, align)?,
        fused: mean_trajectory_error(&fused, &gt, align)?,
        fused_valid: subset_error(&fused_valid, &gt, &valid, align)?,
        frames_total: n,
        frames_registered: registered.iter().filter(|&&r| r).count(),
        frames_valid: valid.iter().filter(|&&v| v).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse_trajectory, PoseSource};
    use crate::gps::ErrorBreakdown;
    use crate::Vector3;
    use proptest::prelude::*;

    fn pts(v: &[[f64; 3]]) -> Vec<Point3> {
        v.iter().map(|p| Point3::from(*p)).collect()
    }

    #[test]
    fn identical_is_zero() {
        let gt = pts(&[[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [3.0, 1.0, 1.0]]);
        assert_eq!(mean_trajectory_error(&gt, &gt, false).unwrap(), 0.0);
        assert!(mean_trajectory_error(&gt, &gt, true).unwrap() < 1e-12);
    }

    #[test]
    fn rigid_shift() {
        let gt = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 1.0, 0.0], [3.0, 3.0, 0.5]]);
        let est: Vec<Point3> = gt.iter().map(|p| p + Vector3::new(5.0, 0.0, 0.0)).collect();
        assert!((mean_trajectory_error(&est, &gt, false).unwrap() - 5.0).abs() < 1e-12);
        assert!(mean_trajectory_error(&est, &gt, true).unwrap() < 1e-9);
    }

    #[test]
    fn straight_line_alignment_is_well_defined() {
        let gt: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let est: Vec<Point3> = gt.iter().map(|p| p + Vector3::new(1.0, 2.0, 0.0)).collect();
        assert!(mean_trajectory_error(&est, &gt, true).unwrap() < 1e-9);
    }

    #[test]
    fn known_offsets() {
        let gt = pts(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let est = pts(&[[0.0, 0.3, 0.0], [1.0, 0.0, 0.4], [2.0, -3.0, 4.0]]);
        let expected = (0.3 + 0.4 + 5.0) / 3.0;
        assert!((mean_trajectory_error(&est, &gt, false).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn mismatch_is_error() {
        let gt = pts(&[[0.0; 3]]);
        assert!(matches!(
            mean_trajectory_error(&gt, &[], false),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn fix(p: Point3) -> GpsFix {
        GpsFix {
            position: p,
            timestamp: 0.0,
            error_breakdown: ErrorBreakdown {
                multipath: 0.0,
                iono: 0.0,
                noise: 0.0,
            },
        }
    }

    fn reg(t: RigidTransform) -> Option<RegistrationResult> {
        Some(RegistrationResult {
            transform: t,
            fitness: 0.8,
            inlier_rmse: 0.1,
            iterations_used: 3,
            converged: true,
            low_confidence: false,
            monotonic_violations: 0,
        })
    }

    struct Fixture {
        gt: Vec<RigidTransform>,
        gps: Vec<GpsFix>,
        slam: Vec<RigidTransform>,
        reg: Vec<Option<RegistrationResult>>,
    }

    fn fixture(n: usize) -> Fixture {
        let gt: Vec<RigidTransform> = (0..n)
            .map(|i| RigidTransform::from_translation(Vector3::new(i as f64, 0.0, 0.0)))
            .collect();
        let slam = gt
            .iter()
            .enumerate()
            .map(|(i, g)| RigidTransform::from_translation(g.translation() + Vector3::new(0.0, 0.05 * i as f64, 0.0)))
            .collect();
        let gps = gt.iter().map(|g| fix(g.origin() + Vector3::new(8.0, 0.0, 0.0))).collect();
        let reg = gt.iter().map(|g| reg(*g)).collect();
        Fixture { gt, gps, slam, reg }
    }

    fn evaluate(f: &Fixture, valid: &[bool]) -> ErrorReport {
        let all = vec![true; f.gt.len()];
        let fused = fuse_trajectory(&f.slam, &f.reg, &all, &f.gps).unwrap();
        let fused_valid = fuse_trajectory(&f.slam, &f.reg, valid, &f.gps).unwrap();
        evaluate_run(
            &RunTrajectories {
                gt: &f.gt,
                gps: &f.gps,
                slam: &f.slam,
                reg: &f.reg,
                valid,
                fused: &fused,
                fused_valid: &fused_valid,
            },
            false,
        )
        .unwrap()
    }

    #[test]
    fn all_valid_columns_agree() {
        let f = fixture(10);
        let r = evaluate(&f, &[true; 10]);
        assert_eq!(r.reg, r.reg_valid);
        assert_eq!(Some(r.fused), r.fused_valid);
        assert!((r.gps - 8.0).abs() < 1e-12);
        assert_eq!(r.frames_valid, 10);
    }

    #[test]
    fn perfect_valid_registration() {
        let mut f = fixture(10);
        // registration is wrong on the odd frames, which the gate rejects
        let valid: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        for i in (1..10).step_by(2) {
            f.reg[i] = reg(RigidTransform::from_translation(f.gt[i].translation() + Vector3::new(0.0, 0.0, 3.0)));
        }
        let r = evaluate(&f, &valid);
        assert_eq!(r.fused_valid, Some(0.0));
        assert_eq!(r.reg_valid, Some(0.0));
        assert!(r.fused > 0.0);
        // cross-check against a direct restriction to gated frames
        let fused_valid = fuse_trajectory(&f.slam, &f.reg, &valid, &f.gps).unwrap();
        let (e, g): (Vec<Point3>, Vec<Point3>) = (0..10)
            .filter(|&i| valid[i])
            .map(|i| (fused_valid[i].pose.origin(), f.gt[i].origin()))
            .unzip();
        assert_eq!(r.fused_valid.unwrap(), mean_trajectory_error(&e, &g, false).unwrap());
        assert!(fused_valid.iter().filter(|x| x.source == PoseSource::Anchored).count() == 5);
    }

    #[test]
    fn no_registration_columns_absent() {
        let mut f = fixture(5);
        f.reg = vec![None; 5];
        let r = evaluate(&f, &[false; 5]);
        assert_eq!(r.reg, None);
        assert_eq!(r.reg_valid, None);
        assert_eq!(r.fused_valid, None);
        assert!(r.slam > 0.0 && r.gps > 0.0);
        assert_eq!(r.frames_registered, 0);
    }

    proptest! {
        #[test]
        fn aligned_error_invariant_under_rigid_motion(
            raw in prop::collection::vec((prop::array::uniform3(-20.0..20.0f64), prop::array::uniform3(-1.0..1.0f64)), 3..30),
            roll in -3.0..3.0f64, pitch in -1.5..1.5f64, yaw in -3.0..3.0f64,
            t in prop::array::uniform3(-50.0..50.0f64),
        ) {
            let gt: Vec<Point3> = raw.iter().map(|(g, _)| Point3::from(*g)).collect();
            let est: Vec<Point3> = raw.iter().map(|(g, n)| Point3::from(*g) + Vector3::from(*n)).collect();
            let m = RigidTransform::from_euler(roll, pitch, yaw, Vector3::from(t));
            let moved: Vec<Point3> = est.iter().map(|p| m.transform_point(p)).collect();
            let a = mean_trajectory_error(&est, &gt, true).unwrap();
            let b = mean_trajectory_error(&moved, &gt, true).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{} {}", a, b);
        }
    }
}
