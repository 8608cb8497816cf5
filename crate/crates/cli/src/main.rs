use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cooploc_core::eval::{
    run_cell, run_sweep_detailed, write_frame_errors_csv, write_sweep_csv, write_sweep_json, write_sweep_table, CellRun,
    OutputFormat, SweepResult, SweepRow,
};
use cooploc_core::fusion::{build_reference_map, write_fusion_csv, FrameQuality, FusedFrame, PoseSource};
use cooploc_core::geometry::ply::write_ply_file;
use cooploc_core::gps::{write_gps_csv, GpsFix};
use cooploc_core::sim::{Permutation, Scenario, ScenarioConfig, ScenarioId};

/// Cooperative LiDAR localization experiments on a synthetic intersection.
#[derive(Parser)]
#[command(name = "cooploc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario against one reference-map permutation.
    Run {
        #[arg(long, default_value = "sim0")]
        scenario: ScenarioId,
        #[arg(long, default_value = "4_infra_2_agent")]
        permutation: Permutation,
        #[command(flatten)]
        common: Common,
        /// Directory for the per-run CSV and JSON outputs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all scenarios against all permutations and print the error table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "table")]
        format: OutputFormat,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-frame error CSVs, one per cell.
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Write the ego scan and the reference map of one frame as PLY.
    ExportClouds {
        #[arg(long, default_value = "sim0")]
        scenario: ScenarioId,
        #[arg(long, default_value = "4_infra_2_agent")]
        permutation: Permutation,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as JSON.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
    /// Frames per run (overrides the configuration).
    #[arg(long)]
    frames: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ScenarioConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(frames) = self.frames {
            cfg.frames = frames;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_pose_csv(poses: impl Iterator<Item = (f64, cooploc_core::RigidTransform)>, mut w: impl Write) -> Result<()> {
    writeln!(w, "t,x,y,z,qw,qx,qy,qz")?;
    for (t, p) in poses {
        let (x, q) = (p.translation(), p.quaternion());
        writeln!(
            w,
            "{t:.3},{:.6},{:.6},{:.6},{:.8},{:.8},{:.8},{:.8}",
            x.x, x.y, x.z, q.w, q.i, q.j, q.k
        )?;
    }
    Ok(())
}

fn write_run(cell: &CellRun, cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let times: Vec<f64> = cell.frames.iter().map(|f| f.t).collect();
    let gps: Vec<GpsFix> = cell.frames.iter().map(|f| f.gps.clone()).collect();
    write_gps_csv(&gps, create(out, "gps.csv")?)?;
    write_pose_csv(cell.frames.iter().map(|f| (f.t, f.slam)), create(out, "slam.csv")?)?;
    write_pose_csv(cell.frames.iter().map(|f| (f.t, f.gt)), create(out, "ground_truth.csv")?)?;
    let quality: Vec<Option<FrameQuality>> = cell
        .frames
        .iter()
        .map(|f| f.registration.as_ref().map(FrameQuality::from))
        .collect();
    let envelopes: Vec<(f64, f64)> = cell.frames.iter().map(|f| (f.f_env, f.r_env)).collect();
    let fused: Vec<FusedFrame> = cell
        .frames
        .iter()
        .map(|f| FusedFrame {
            pose: f.fused_valid,
            source: if f.valid { PoseSource::Anchored } else { PoseSource::Propagated },
            valid: f.valid,
        })
        .collect();
    write_fusion_csv(&times, &quality, &envelopes, &fused, create(out, "fusion.csv")?)?;
    write_frame_errors_csv(cell, create(out, "frame_errors.csv")?)?;
    let mut summary = create(out, "summary.json")?;
    serde_json::to_writer_pretty(
        &mut summary,
        &serde_json::json!({
            "scenario": cell.scenario,
            "permutation": cell.permutation,
            "seed": cfg.seed,
            "report": cell.report,
            "registration_errors": cell.registration_errors,
            "icp_violations": cell.icp_violations,
        }),
    )?;
    writeln!(summary)?;
    let mut config = create(out, "config.json")?;
    serde_json::to_writer_pretty(&mut config, cfg)?;
    writeln!(config)?;
    Ok(())
}

fn emit(sweep: &SweepResult, format: OutputFormat, w: impl Write) -> Result<()> {
    match format {
        OutputFormat::Table => write_sweep_table(sweep, w)?,
        OutputFormat::Csv => write_sweep_csv(sweep, w)?,
        OutputFormat::Json => write_sweep_json(sweep, w)?,
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            permutation,
            common,
            out,
        } => {
            let cfg = ScenarioConfig {
                scenario,
                permutation,
                ..common.load()?
            };
            let start = Instant::now();
            let cell = run_cell(&cfg)?;
            write_run(&cell, &cfg, &out)?;
            let row = SweepResult {
                seed: cfg.seed,
                rows: vec![SweepRow {
                    scenario,
                    permutation,
                    report: Some(cell.report.clone()),
                    error: None,
                }],
            };
            write_sweep_table(&row, io::stdout().lock())?;
            eprintln!("{} frames in {:.1} s, outputs in {}", cfg.frames, start.elapsed().as_secs_f64(), out.display());
        }
        Command::Sweep {
            common,
            format,
            out,
            plots,
        } => {
            let cfg = common.load()?;
            let start = Instant::now();
            let (sweep, cells) = run_sweep_detailed(&cfg, cfg.seed);
            if let Some(dir) = plots {
                fs::create_dir_all(&dir)?;
                for cell in &cells {
                    write_frame_errors_csv(cell, create(&dir, &format!("{}_{}.csv", cell.scenario, cell.permutation))?)?;
                }
            }
            match out {
                Some(path) => emit(&sweep, format, BufWriter::new(File::create(&path)?))?,
                None => emit(&sweep, format, io::stdout().lock())?,
            }
            eprintln!("sweep finished in {:.1} s", start.elapsed().as_secs_f64());
            if sweep.rows.iter().any(|r| r.error.is_some()) {
                bail!("some cells failed");
            }
        }
        Command::ExportClouds {
            scenario,
            permutation,
            frame,
            common,
            out,
        } => {
            let cfg = ScenarioConfig {
                scenario,
                permutation,
                ..common.load()?
            };
            if frame >= cfg.frames {
                bail!("frame {frame} out of range (scenario has {} frames)", cfg.frames);
            }
            let sc = Scenario::new(&cfg)?;
            fs::create_dir_all(&out)?;
            let mut ego = sc.ego_scan(frame).transformed(&sc.ego_sensor_pose(frame));
            ego.set_frame_id("world");
            write_ply_file(&ego, out.join(format!("ego_{frame}.ply")))?;
            let map = build_reference_map(&sc.coop_scans(frame, permutation), cfg.map_voxel)?;
            write_ply_file(&map, out.join(format!("map_{permutation}_{frame}.ply")))?;
            eprintln!("wrote {} ego and {} map points to {}", ego.len(), map.len(), out.display());
        }
        Command::DefaultConfig => {
            serde_json::to_writer_pretty(io::stdout().lock(), &ScenarioConfig::default())?;
            println!();
        }
    }
    Ok(())
}
