//! Point-cloud file formats: ASCII PLY with optional normals, and the
//! KITTI velodyne binary scan layout (little-endian float32 x, y, z,
//! reflectance; reflectance is discarded on read).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::{CloudError, PointCloud};

fn io_err(path: &Path, source: std::io::Error) -> CloudError {
    CloudError::Io { path: path.display().to_string(), source }
}

fn malformed(format: &'static str, path: &Path, reason: impl Into<String>) -> CloudError {
    CloudError::Malformed { format, path: path.display().to_string(), reason: reason.into() }
}

/// Reads a KITTI velodyne `.bin` scan. Truncated files are an error, not a
/// partial cloud.
pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud, CloudError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(malformed("velodyne bin", path, format!("{} bytes is not a multiple of 16", bytes.len())));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap());
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(malformed("velodyne bin", path, "non-finite coordinate"));
        }
        points.push(Vector3::new(f64::from(x), f64::from(y), f64::from(z)));
    }
    PointCloud::new(points, path.display().to_string())
}

/// Writes a cloud in the KITTI velodyne binary layout (reflectance 0).
/// Coordinates are narrowed to f32.
pub fn write_velodyne_bin(cloud: &PointCloud, path: &Path) -> Result<(), CloudError> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes ASCII PLY with x, y, z and, when present, nx, ny, nz.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), CloudError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut header = String::new();
    header.push_str("ply\nformat ascii 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    let has_normals = cloud.normals().is_some();
    if has_normals {
        header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    header.push_str("end_header\n");
    f.write_all(header.as_bytes()).map_err(|e| io_err(path, e))?;
    let mut body = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        body.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
        if let Some(ns) = cloud.normals() {
            let n = ns[i];
            body.push_str(&format!(" {} {} {}", n[0], n[1], n[2]));
        }
        body.push('\n');
    }
    f.write_all(body.as_bytes()).map_err(|e| io_err(path, e))
}

/// Reads ASCII PLY written by [`write_ply`] (or compatible files with
/// float/double x y z [nx ny nz] vertex properties).
pub fn read_ply(path: &Path) -> Result<PointCloud, CloudError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(malformed("ply", path, "missing ply magic"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(malformed("ply", path, "only ascii PLY supported"));
                }
            }
            Some("element") => {
                if tok.next() == Some("vertex") {
                    let n = tok
                        .next()
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| malformed("ply", path, "bad vertex count"))?;
                    vertex_count = Some(n);
                } else if vertex_count.is_some() {
                    return Err(malformed("ply", path, "unsupported non-vertex element"));
                }
            }
            Some("property") => {
                let _ty = tok.next();
                if let Some(name) = tok.next() {
                    props.push(name.to_string());
                }
            }
            Some("comment") | None => {}
            Some(other) => {
                return Err(malformed("ply", path, format!("unexpected header token {other}")));
            }
        }
    }
    let n = vertex_count.ok_or_else(|| malformed("ply", path, "no vertex element"))?;
    let has_normals = props.iter().any(|p| p == "nx");
    let want = if has_normals { 6 } else { 3 };
    if props.len() != want || props[0] != "x" || props[1] != "y" || props[2] != "z" {
        return Err(malformed("ply", path, format!("unsupported property layout {props:?}")));
    }
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(if has_normals { n } else { 0 });
    for _ in 0..n {
        let line = lines.next().ok_or_else(|| malformed("ply", path, "truncated body"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| malformed("ply", path, "bad float"))?;
        if vals.len() != want {
            return Err(malformed("ply", path, "wrong field count"));
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
        if has_normals {
            normals.push(Vector3::new(vals[3], vals[4], vals[5]));
        }
    }
    let cloud = PointCloud::new(points, path.display().to_string())?;
    if has_normals {
        cloud.with_normals(normals, None)
    } else {
        Ok(cloud)
    }
}
