use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{evaluate_run, ErrorReport, RunTrajectories};
use crate::error::{Error, Result};
use crate::fusion::{build_reference_map, compute_envelopes, consistent_frames, fuse_trajectory, gate_frames, CooperativeScan, FrameQuality, SensorKind};
use crate::geometry::{PointCloud, RigidTransform, Vector3};
use crate::gps::GpsFix;
use crate::registration::{Registrar, RegistrationResult};
use crate::rng::{derive_seed, stream};
use crate::sim::{Permutation, Scenario, ScenarioConfig, ScenarioId};
use crate::slam::{perturb_scan, slam_step, slam_trajectory_in_world, OdometryPrior, PriorSource, SlamState};
use crate::par;

const TAG_JITTER: u64 = 0x4A49_5454;
const TAG_PRIOR: u64 = 0x5052_494F;
const TAG_RANSAC: u64 = 0x5241_4E53;

/// Map points farther than the LiDAR range plus this margin from the
/// initial guess cannot overlap the ego scan unless the guess is off by
/// more than the margin.
const MAP_CROP_MARGIN: f64 = 25.0;

/// Translation (m) and yaw (rad) noise of the perturbed ground-truth prior.
const PRIOR_NOISE: (f64, f64) = (0.05, 0.005);

/// One frame of a cell run. Poses are ego body poses in the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub t: f64,
    pub gt: RigidTransform,
    pub gps: GpsFix,
    pub slam: RigidTransform,
    /// `None` when registration raised an error.
    pub registration: Option<RegistrationResult>,
    pub f_env: f64,
    pub r_env: f64,
    pub valid: bool,
    pub fused: RigidTransform,
    pub fused_valid: RigidTransform,
}

/// Outcome of one (scenario, permutation) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub scenario: ScenarioId,
    pub permutation: Permutation,
    pub report: ErrorReport,
    pub frames: Vec<FrameLog>,
    /// Frames whose registration raised an error.
    pub registration_errors: usize,
    /// Non-monotone ICP iterations summed over every registration.
    pub icp_violations: usize,
}

/// Odometry for the whole run, in world body poses, anchored at the first
/// ground-truth sensor pose.
fn odometry(sc: &Scenario, scans: &[PointCloud]) -> Result<Vec<RigidTransform>> {
    let cfg = sc.config();
    let scenario = cfg.scenario.index();
    let mut state = SlamState::new(&cfg.slam);
    for (i, scan) in scans.iter().enumerate() {
        let jittered = perturb_scan(scan, cfg.slam.scan_jitter_sigma, &mut stream(cfg.seed, &[TAG_JITTER, scenario, i as u64]));
        let prior = match cfg.slam.prior {
            PriorSource::ConstantVelocity => state.constant_velocity_prior(),
            PriorSource::GroundTruthPerturbed => {
                let truth = match i {
                    0 => RigidTransform::identity(),
                    _ => sc.ego_sensor_pose(i - 1).inverse().compose(&sc.ego_sensor_pose(i)),
                };
                let mut rng = stream(cfg.seed, &[TAG_PRIOR, scenario, i as u64]);
                let mut draw = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
                let noise = RigidTransform::from_yaw(
                    draw(PRIOR_NOISE.1),
                    Vector3::new(draw(PRIOR_NOISE.0), draw(PRIOR_NOISE.0), draw(PRIOR_NOISE.0)),
                );
                OdometryPrior {
                    delta: truth.compose(&noise),
                    source: PriorSource::GroundTruthPerturbed,
                }
            }
        };
        state = slam_step(state, &jittered, &prior, &cfg.slam)?;
    }
    let mount_inv = sc.mount().inverse();
    Ok(slam_trajectory_in_world(&state, &sc.ego_sensor_pose(0))
        .into_iter()
        .map(|p| p.compose(&mount_inv))
        .collect())
}

fn selected(scan: &CooperativeScan, perm: Permutation) -> bool {
    match scan.kind {
        SensorKind::Agent => perm.uses_agents(),
        SensorKind::Infrastructure => perm.corners().iter().any(|c| scan.sensor_id == format!("infra_{c}")),
    }
}

/// Registers frame `i` against the map of every permutation. The ego scan
/// is placed at the initial guess (GPS position, odometry orientation)
/// before registration, so the returned body poses are world poses.
fn register_frame(
    sc: &Scenario,
    registrar: &Registrar,
    i: usize,
    scan: &PointCloud,
    slam: &RigidTransform,
    gps: &GpsFix,
    perms: &[Permutation],
) -> Vec<Result<RegistrationResult>> {
    let cfg = sc.config();
    let guess_body = match RigidTransform::new(*slam.rotation(), gps.position.coords) {
        Ok(t) => t,
        Err(e) => return perms.iter().map(|_| Err(Error::InvalidTransform(e.to_string()))).collect(),
    };
    let guess = guess_body.compose(sc.mount());
    let src = match registrar.prepare(&scan.transformed(&guess)) {
        Ok(s) => s,
        Err(e) => {
            let msg = e.to_string();
            return perms.iter().map(|_| Err(Error::InvalidParameter(msg.clone()))).collect();
        }
    };
    let all = sc.coop_scans(i, Permutation::FourInfraTwoAgent);
    let reach = cfg.lidar.max_range + MAP_CROP_MARGIN;
    let centre = guess.origin();
    let mount_inv = sc.mount().inverse();
    perms
        .iter()
        .map(|&perm| {
            let subset: Vec<CooperativeScan> = all.iter().filter(|s| selected(s, perm)).cloned().collect();
            let map = build_reference_map(&subset, cfg.map_voxel)?.filtered(|p| (p - centre).norm() <= reach);
            let tgt = registrar.prepare(&map)?;
            let seed = derive_seed(cfg.seed, &[TAG_RANSAC, cfg.scenario.index(), i as u64, perm.index()]);
            let mut r = registrar.register_seeded(&src, &tgt, seed)?;
            r.transform = r.transform.compose(&guess).compose(&mount_inv);
            Ok(r)
        })
        .collect()
}

fn assemble(sc: &Scenario, perm: Permutation, slam: &[RigidTransform], gps: &[GpsFix], reg: Vec<Result<RegistrationResult>>) -> Result<CellRun> {
    let cfg = sc.config();
    let n = sc.frames();
    let registration_errors = reg.iter().filter(|r| r.is_err()).count();
    let reg: Vec<Option<RegistrationResult>> = reg.into_iter().map(Result::ok).collect();
    let quality: Vec<FrameQuality> = reg
        .iter()
        .map(|r| {
            r.as_ref().map_or(
                FrameQuality {
                    fitness: 0.0,
                    rmse: f64::INFINITY,
                },
                FrameQuality::from,
            )
        })
        .collect();
    let envelopes = compute_envelopes(&quality, &cfg.gate)?;
    let gate = gate_frames(&quality, &cfg.gate)?;
    let accepted: Vec<bool> = gate
        .iter()
        .zip(&reg)
        .map(|(g, r)| *g && r.as_ref().is_some_and(|r| !r.low_confidence))
        .collect();
    let valid = match &cfg.consistency {
        Some(c) => consistent_frames(slam, &reg, &accepted, c)?,
        None => accepted,
    };
    let fused = fuse_trajectory(slam, &reg, &vec![true; n], gps)?;
    let fused_valid = fuse_trajectory(slam, &reg, &valid, gps)?;
    let gt: Vec<RigidTransform> = (0..n).map(|i| sc.gt_pose(i)).collect();
    let report = evaluate_run(
        &RunTrajectories {
            gt: &gt,
            gps,
            slam,
            reg: &reg,
            valid: &valid,
            fused: &fused,
            fused_valid: &fused_valid,
        },
        cfg.align_errors,
    )?;
    let icp_violations = reg.iter().flatten().map(|r| r.monotonic_violations).sum();
    let frames = (0..n)
        .map(|i| FrameLog {
            t: sc.time(i),
            gt: gt[i],
            gps: gps[i].clone(),
            slam: slam[i],
            registration: reg[i].clone(),
            f_env: envelopes[i].0,
            r_env: envelopes[i].1,
            valid: valid[i],
            fused: fused[i].pose,
            fused_valid: fused_valid[i].pose,
        })
        .collect();
    Ok(CellRun {
        scenario: cfg.scenario,
        permutation: perm,
        report,
        frames,
        registration_errors,
        icp_violations,
    })
}

/// Runs one scenario against several map permutations. Scans, GPS and
/// odometry are shared; only the reference map differs between cells.
pub fn run_scenario_cells(cfg: &ScenarioConfig, perms: &[Permutation]) -> Result<Vec<CellRun>> {
    if perms.is_empty() {
        return Err(Error::EmptyInput("permutation list"));
    }
    let sc = Scenario::new(cfg)?;
    let registrar = Registrar::new(cfg.registration.clone())?;
    let n = sc.frames();
    let scans = par::map_range(n, |i| sc.ego_scan(i));
    let gps: Vec<GpsFix> = (0..n).map(|i| sc.gps_fix(i)).collect::<Result<_>>()?;
    let slam = odometry(&sc, &scans)?;
    let per_frame = par::map_range(n, |i| register_frame(&sc, &registrar, i, &scans[i], &slam[i], &gps[i], perms));
    let mut by_perm: Vec<Vec<Result<RegistrationResult>>> = perms.iter().map(|_| Vec::with_capacity(n)).collect();
    for frame in per_frame {
        for (k, r) in frame.into_iter().enumerate() {
            by_perm[k].push(r);
        }
    }
    perms
        .iter()
        .zip(by_perm)
        .map(|(&p, reg)| assemble(&sc, p, &slam, &gps, reg))
        .collect()
}

/// The cell selected by `cfg.scenario` and `cfg.permutation`.
pub fn run_cell(cfg: &ScenarioConfig) -> Result<CellRun> {
    let mut cells = run_scenario_cells(cfg, &[cfg.permutation])?;
    Ok(cells.remove(0))
}

/// One row of the sweep table; a failed cell keeps its error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: ScenarioId,
    pub permutation: Permutation,
    pub report: Option<ErrorReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

/// Every scenario against every permutation, with the full per-frame logs
/// of the cells that completed.
pub fn run_sweep_detailed(base: &ScenarioConfig, seed: u64) -> (SweepResult, Vec<CellRun>) {
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for scenario in ScenarioId::ALL {
        let cfg = ScenarioConfig {
            scenario,
            seed,
            ..base.clone()
        };
        match run_scenario_cells(&cfg, &Permutation::ALL) {
            Ok(runs) => {
                for run in runs {
                    rows.push(SweepRow {
                        scenario,
                        permutation: run.permutation,
                        report: Some(run.report.clone()),
                        error: None,
                    });
                    cells.push(run);
                }
            }
            Err(e) => rows.extend(Permutation::ALL.iter().map(|&permutation| SweepRow {
                scenario,
                permutation,
                report: None,
                error: Some(e.to_string()),
            })),
        }
    }
    (SweepResult { seed, rows }, cells)
}

/// Every scenario against every permutation (12 cells).
pub fn run_sweep(base: &ScenarioConfig, seed: u64) -> SweepResult {
    run_sweep_detailed(base, seed).0
}
