use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::{CellRun, SweepResult};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(invalid(format!("unknown output format `{s}` (table, csv, json)"))),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Table => "table",
            Self::Csv => "csv",
            Self::Json => "json",
        })
    }
}

const COLUMNS: [&str; 6] = ["slam", "gps", "reg", "reg_valid", "fused", "fused_valid"];

fn cells(row: &super::SweepRow) -> [Option<f64>; 6] {
    match &row.report {
        Some(r) => [Some(r.slam), Some(r.gps), r.reg, r.reg_valid, Some(r.fused), r.fused_valid],
        None => [None; 6],
    }
}

/// Fixed-precision CSV, one row per cell. Absent values are empty fields.
pub fn write_sweep_csv<W: Write>(sweep: &SweepResult, mut w: W) -> Result<()> {
    writeln!(w, "scenario,permutation,{},frames,registered,valid,error", COLUMNS.join(","))?;
    for row in &sweep.rows {
        let values: Vec<String> = cells(row)
            .iter()
            .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default())
            .collect();
        let (frames, registered, valid) = row
            .report
            .as_ref()
            .map_or((String::new(), String::new(), String::new()), |r| {
                (
                    r.frames_total.to_string(),
                    r.frames_registered.to_string(),
                    r.frames_valid.to_string(),
                )
            });
        let error = row.error.as_deref().unwrap_or("").replace(['"', ',', '\n'], " ");
        writeln!(
            w,
            "{},{},{},{frames},{registered},{valid},{error}",
            row.scenario,
            row.permutation,
            values.join(",")
        )?;
    }
    Ok(())
}

/// Aligned text table with errors in meters.
pub fn write_sweep_table<W: Write>(sweep: &SweepResult, mut w: W) -> Result<()> {
    writeln!(
        w,
        "{:<6} {:<16} {:>9} {:>9} {:>9} {:>9} {:>9} {:>11} {:>7}",
        "sim", "map", "SLAM", "GPS", "Reg", "Reg(V)", "Fused", "Fused(V)", "valid"
    )?;
    for row in &sweep.rows {
        let v: Vec<String> = cells(row)
            .iter()
            .map(|x| x.map_or("-".to_string(), |x| format!("{x:.3}")))
            .collect();
        let valid = row
            .report
            .as_ref()
            .map_or("-".to_string(), |r| format!("{}/{}", r.frames_valid, r.frames_total));
        write!(
            w,
            "{:<6} {:<16} {:>9} {:>9} {:>9} {:>9} {:>9} {:>11} {:>7}",
            row.scenario.to_string(),
            row.permutation.to_string(),
            v[0],
            v[1],
            v[2],
            v[3],
            v[4],
            v[5],
            valid
        )?;
        match &row.error {
            Some(e) => writeln!(w, "  error: {e}")?,
            None => writeln!(w)?,
        }
    }
    Ok(())
}

pub fn write_sweep_json<W: Write>(sweep: &SweepResult, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, sweep)?;
    writeln!(w)?;
    Ok(())
}

/// Per-frame positional errors of one cell, for plotting. Absent
/// registrations leave their column empty.
pub fn write_frame_errors_csv<W: Write>(cell: &CellRun, mut w: W) -> Result<()> {
    writeln!(w, "frame,t,gt_x,gt_y,gt_z,slam,gps,reg,fused,fused_valid,fitness,rmse,f_env,r_env,valid")?;
    for (i, f) in cell.frames.iter().enumerate() {
        let gt = f.gt.origin();
        let err = |p: nalgebra::Point3<f64>| (p - gt).norm();
        let (reg, fitness, rmse) = match &f.registration {
            Some(r) => (
                format!("{:.4}", err(r.transform.origin())),
                format!("{:.4}", r.fitness),
                format!("{:.4}", r.inlier_rmse),
            ),
            None => Default::default(),
        };
        writeln!(
            w,
            "{i},{:.3},{:.3},{:.3},{:.3},{:.4},{:.4},{reg},{:.4},{:.4},{fitness},{rmse},{:.4},{:.4},{}",
            f.t,
            gt.x,
            gt.y,
            gt.z,
            err(f.slam.origin()),
            err(f.gps.position),
            err(f.fused.origin()),
            err(f.fused_valid.origin()),
            f.f_env,
            f.r_env,
            f.valid as u8
        )?;
    }
    Ok(())
}
