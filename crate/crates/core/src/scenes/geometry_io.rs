use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cloud::Model;
use crate::error::{Error, Result};
use crate::real::{Aabb, Real};
use crate::render::OccupancyGrid;

/// Magic line prefix of the raw occupancy format:
/// `OCCGRID nx ny nz\n` followed by `nx·ny·nz` bytes (0 or 1), x fastest.
const OCC_MAGIC: &[u8] = b"OCCGRID";

/// Externally supplied initial geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub points: Vec<[f64; 3]>,
    /// Present when the file was an occupancy grid.
    pub occupancy: Option<OccupancyGrid>,
}

/// Reads whitespace-separated `x y z` lines; blank lines and `#` comments are skipped.
pub fn read_points(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text, path)
}

fn parse_points(text: &str, path: &Path) -> Result<Vec<[f64; 3]>> {
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(
                path,
                format!("line {}: expected three finite numbers", n + 1),
            ));
        }
        pts.push([vals[0], vals[1], vals[2]]);
    }
    Ok(pts)
}

pub fn write_points(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    let mut s = String::new();
    for p in points {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_occupancy(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    let n = grid.resolution();
    let mut bytes = format!("OCCGRID {n} {n} {n}\n").into_bytes();
    bytes.extend(grid.voxels().iter().map(|&v| v as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the raw occupancy format; the grid spans `aabb`.
pub fn read_occupancy(path: &Path, aabb: Aabb) -> Result<OccupancyGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_occupancy(&bytes, aabb, path)
}

fn parse_occupancy(bytes: &[u8], aabb: Aabb, path: &Path) -> Result<OccupancyGrid> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, "missing grid header"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::parse(path, "grid header is not text"))?;
    let mut parts = header.split_whitespace();
    if parts.next().map(str::as_bytes) != Some(OCC_MAGIC) {
        return Err(Error::parse(path, "grid header must start with OCCGRID"));
    }
    let dims: Vec<usize> = parts
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path, format!("grid shape: {e}")))?;
    if dims.len() != 3 || dims[0] != dims[1] || dims[1] != dims[2] || dims[0] == 0 {
        return Err(Error::parse(
            path,
            format!("grid shape must be three equal positive sizes, got {dims:?}"),
        ));
    }
    let body = &bytes[nl + 1..];
    if body.iter().any(|&b| b > 1) {
        return Err(Error::parse(path, "grid voxels must be bytes 0 or 1"));
    }
    OccupancyGrid::from_voxels(dims[0], aabb, body.iter().map(|&b| b == 1).collect())
        .map_err(|e| Error::parse(path, e.to_string()))
}

/// Loads a point file, or an occupancy grid whose occupied voxel centres
/// become the points.
pub fn load_geometry(path: &Path, aabb: Aabb) -> Result<Geometry> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(OCC_MAGIC) {
        let grid = parse_occupancy(&bytes, aabb, path)?;
        return Ok(Geometry {
            points: grid.occupied_centers(),
            occupancy: Some(grid),
        });
    }
    let text =
        String::from_utf8(bytes).map_err(|_| Error::parse(path, "point file is not UTF-8 text"))?;
    Ok(Geometry {
        points: parse_points(&text, path)?,
        occupancy: None,
    })
}

/// One `x y z edge` line per tensor, scale by scale.
pub fn write_tensor_points<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    let mut s = String::new();
    for cloud in &model.scales {
        for t in cloud.tensors() {
            let p = t.position().to_f64();
            writeln!(s, "{} {} {} {}", p[0], p[1], p[2], t.edge().as_f64()).unwrap();
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
