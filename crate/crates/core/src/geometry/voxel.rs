use std::collections::HashMap;

use super::{Point3, PointCloud, Vector3};
use crate::error::{invalid, Result};

/// Integer voxel coordinates.
pub type VoxelKey = (i64, i64, i64);

/// Voxel containing `p` on a grid of cell size `size` anchored at the origin.
/// Cells are half-open, `[i*s, (i+1)*s)`.
#[inline]
pub fn voxel_key(p: &Point3, size: f64) -> VoxelKey {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

struct Cell {
    sum: Vector3,
    normal_sum: Vector3,
    count: usize,
}

/// Replaces all points falling into a voxel with their centroid.
///
/// Output points appear in the order their voxels were first encountered.
/// Normals, if present, are averaged and re-normalized.
pub fn voxel_downsample(c: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(invalid(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut slots: HashMap<VoxelKey, usize> = HashMap::with_capacity(c.len() / 2 + 1);
    let mut cells: Vec<Cell> = Vec::new();
    let normals = c.normals();
    for (i, p) in c.points().iter().enumerate() {
        let key = voxel_key(p, voxel_size);
        let slot = *slots.entry(key).or_insert_with(|| {
            cells.push(Cell {
                sum: Vector3::zeros(),
                normal_sum: Vector3::zeros(),
                count: 0,
            });
            cells.len() - 1
        });
        let cell = &mut cells[slot];
        cell.sum += p.coords;
        cell.count += 1;
        if let Some(ns) = normals {
            cell.normal_sum += ns[i];
        }
    }
    let points = cells
        .iter()
        .map(|cell| Point3::from(cell.sum / cell.count as f64))
        .collect();
    let out_normals = normals.map(|_| {
        cells
            .iter()
            .map(|cell| {
                let n = cell.normal_sum.norm();
                if n > 1e-12 {
                    cell.normal_sum / n
                } else {
                    Vector3::z()
                }
            })
            .collect()
    });
    Ok(PointCloud::from_parts(
        points,
        out_normals,
        c.frame_id().to_string(),
        c.viewpoints().to_vec(),
    ))
}
