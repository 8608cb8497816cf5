//! ASCII PLY import/export for point clouds.
//!
//! Writes a single `vertex` element with `x y z` and, when the cloud has
//! normals, `nx ny nz` (all `double`). Reading accepts any ASCII PLY whose
//! vertex element carries `x y z` (other properties and elements are skipped).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Point3, PointCloud, Vector3};
use crate::error::{Error, Result};

pub fn write_ply<W: Write>(cloud: &PointCloud, mut w: W) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment frame_id {}", cloud.frame_id())?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property double {axis}")?;
    }
    if cloud.normals().is_some() {
        for axis in ["nx", "ny", "nz"] {
            writeln!(w, "property double {axis}")?;
        }
    }
    writeln!(w, "end_header")?;
    match cloud.normals() {
        Some(ns) => {
            for (p, n) in cloud.points().iter().zip(ns) {
                writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z)?;
            }
        }
        None => {
            for p in cloud.points() {
                writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ply_file(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_ply(cloud, BufWriter::new(File::create(path)?))
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

fn ply_err(msg: impl Into<String>) -> Error {
    Error::Ply(msg.into())
}

pub fn read_ply<R: BufRead>(r: R) -> Result<PointCloud> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| ply_err("unexpected end of file"))?
            .map_err(Error::from)
    };
    if next()?.trim() != "ply" {
        return Err(ply_err("missing magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut frame_id = String::from("world");
    loop {
        let line = next()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "ascii" {
                    return Err(ply_err(format!("unsupported format {fmt}")));
                }
            }
            ["comment", "frame_id", id] => frame_id = (*id).to_string(),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: (*name).to_string(),
                count: count.parse().map_err(|_| ply_err("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", .., name] | ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| ply_err("property before element"))?
                .props
                .push((*name).to_string()),
            ["end_header"] => break,
            _ => return Err(ply_err(format!("unrecognized header line: {line}"))),
        }
    }
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut has_normals = false;
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                next()?;
            }
            continue;
        }
        let pos = |n: &str| el.props.iter().position(|p| p == n);
        let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(ply_err("vertex element lacks x/y/z")),
        };
        let nidx = match (pos("nx"), pos("ny"), pos("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        has_normals = nidx.is_some();
        for _ in 0..el.count {
            let line = next()?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| ply_err(format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() < el.props.len() {
                return Err(ply_err("short vertex row"));
            }
            points.push(Point3::new(vals[ix], vals[iy], vals[iz]));
            if let Some((a, b, c)) = nidx {
                normals.push(Vector3::new(vals[a], vals[b], vals[c]));
            }
        }
    }
    let cloud = PointCloud::new(points, frame_id)?;
    if has_normals {
        cloud.with_normals(normals)
    } else {
        Ok(cloud)
    }
}

pub fn read_ply_file(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_ply(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_normals() {
        let c = PointCloud::from_xyz(&[[1.5, -2.0, 3.25], [0.1, 0.2, 0.3]], "map")
            .unwrap()
            .with_normals(vec![Vector3::x(), Vector3::new(0.0, 0.6, 0.8)])
            .unwrap();
        let mut buf = Vec::new();
        write_ply(&c, &mut buf).unwrap();
        let back = read_ply(&buf[..]).unwrap();
        assert_eq!(back.points(), c.points());
        assert_eq!(back.normals(), c.normals());
        assert_eq!(back.frame_id(), "map");
    }

    #[test]
    fn reads_foreign_layout() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float intensity\nproperty float x\n\
                    property float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n5 1 2 3\n6 4 5 6\n3 0 1 1\n";
        let c = read_ply(text.as_bytes()).unwrap();
        assert_eq!(c.points()[1], Point3::new(4.0, 5.0, 6.0));
        assert!(c.normals().is_none());
    }

    #[test]
    fn rejects_binary() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(read_ply(text.as_bytes()).is_err());
    }
}
