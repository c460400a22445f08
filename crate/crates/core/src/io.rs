//! Plain-text persistence for clouds and depth maps.
//!
//! Three formats, all ASCII and all written with shortest round-trip float
//! formatting so that write-then-read reproduces every value bit-exactly:
//!
//! * PLY: standard header, one `x y z` vertex line per point.
//! * XYZ: bare `x,y,z` lines, no header.
//! * Depth grid: a `P2F` magic line, dimensions, then one row of values
//!   per line with `nan` marking invalid pixels, plus a JSON sidecar at
//!   `<path>.json` holding `{"scale":..,"origin":[..],"resolution":..}`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{DepthMap, PointCloud};

/// Errors surfaced by readers and writers.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

impl IoError {
    fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}

/// Writes a cloud as ASCII PLY with float x, y, z vertex properties.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads an ASCII PLY with x, y, z vertex properties in any order.
/// Comment lines are skipped; non-vertex elements are rejected.
pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, magic) = lines
        .next()
        .ok_or_else(|| IoError::parse(path, 1, "empty file"))?;
    if magic.trim() != "ply" {
        return Err(IoError::parse(path, 1, "missing 'ply' magic"));
    }

    let mut vertex_count: Option<usize> = None;
    let mut prop_order: Vec<String> = Vec::new();
    let mut header_end = 0usize;
    for (idx, line) in &mut lines {
        let line = line.trim();
        let lineno = idx + 1;
        if line == "end_header" {
            header_end = lineno;
            break;
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                if words.next() != Some("ascii") {
                    return Err(IoError::parse(path, lineno, "only ascii format is supported"));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let kind = words.next().unwrap_or("");
                if kind != "vertex" {
                    return Err(IoError::parse(
                        path,
                        lineno,
                        format!("unsupported element '{kind}'"),
                    ));
                }
                let count = words
                    .next()
                    .and_then(|w| w.parse::<usize>().ok())
                    .ok_or_else(|| IoError::parse(path, lineno, "bad vertex count"))?;
                vertex_count = Some(count);
            }
            Some("property") => {
                let _ty = words.next();
                let name = words
                    .next()
                    .ok_or_else(|| IoError::parse(path, lineno, "property without a name"))?;
                prop_order.push(name.to_string());
            }
            Some(other) => {
                return Err(IoError::parse(
                    path,
                    lineno,
                    format!("unexpected header keyword '{other}'"),
                ));
            }
        }
    }
    if header_end == 0 {
        return Err(IoError::parse(path, 1, "header never terminated"));
    }
    let count =
        vertex_count.ok_or_else(|| IoError::parse(path, header_end, "no vertex element"))?;
    let slot = |name: &str| prop_order.iter().position(|p| p == name);
    let (ix, iy, iz) = match (slot("x"), slot("y"), slot("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(IoError::parse(path, header_end, "missing x/y/z properties")),
    };

    let mut points = Vec::with_capacity(count);
    for (idx, line) in lines {
        if points.len() == count {
            break;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < prop_order.len() {
            return Err(IoError::parse(
                path,
                lineno,
                format!("expected {} fields, found {}", prop_order.len(), fields.len()),
            ));
        }
        let read = |i: usize| -> Result<f64, IoError> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| IoError::parse(path, lineno, format!("bad float: {e}")))
        };
        points.push([read(ix)?, read(iy)?, read(iz)?]);
    }
    if points.len() != count {
        return Err(IoError::parse(
            path,
            header_end,
            format!("header promised {count} vertices, file has {}", points.len()),
        ));
    }
    Ok(PointCloud::new(points))
}

/// Writes one comma-separated `x,y,z` line per point, in millimetres.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut out = String::new();
    for p in &cloud.points {
        let _ = writeln!(out, "{},{},{}", p[0], p[1], p[2]);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads an XYZ CSV; blank lines are skipped, an empty file is an empty
/// cloud.
pub fn read_xyz(path: &Path) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(IoError::parse(
                path,
                lineno,
                format!("expected 3 comma-separated fields, found {}", fields.len()),
            ));
        }
        let mut p = [0.0f64; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f
                .trim()
                .parse::<f64>()
                .map_err(|e| IoError::parse(path, lineno, format!("bad float: {e}")))?;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

/// Geometry metadata stored next to a depth grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridSidecar {
    scale: f64,
    origin: [f64; 2],
    resolution: usize,
}

/// Sidecar path convention: the grid path with `.json` appended.
fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Writes a depth map as a `P2F` ASCII grid (rows of z values, `nan` for
/// invalid pixels) plus the JSON sidecar with scale, origin, resolution.
pub fn write_depth_map(path: &Path, map: &DepthMap) -> Result<(), IoError> {
    let res = map.resolution();
    let mut out = String::new();
    let _ = writeln!(out, "P2F\n{res} {res}");
    for r in 0..res {
        for c in 0..res {
            if c > 0 {
                out.push(' ');
            }
            if map.is_valid(r, c) {
                let _ = write!(out, "{}", map.depth(r, c));
            } else {
                out.push_str("nan");
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    let sidecar = GridSidecar {
        scale: map.scale(),
        origin: map.origin(),
        resolution: res,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar always serializes");
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Reads a `P2F` grid and its sidecar back into a depth map. Pixels whose
/// value is `nan` come back invalid with a zero sentinel.
pub fn read_depth_map(path: &Path) -> Result<DepthMap, IoError> {
    let text = fs::read_to_string(path)?;
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path)?;
    let sidecar: GridSidecar = serde_json::from_str(&side_text).map_err(|e| {
        IoError::parse(&side_path, e.line(), format!("bad sidecar: {e}"))
    })?;

    let mut lines = text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| IoError::parse(path, 1, "empty file"))?;
    if magic.trim() != "P2F" {
        return Err(IoError::parse(path, 1, "missing 'P2F' magic"));
    }
    let (idx, dims) = lines
        .next()
        .ok_or_else(|| IoError::parse(path, 2, "missing dimensions"))?;
    let mut words = dims.split_whitespace();
    let w: usize = words
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| IoError::parse(path, idx + 1, "bad width"))?;
    let h: usize = words
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| IoError::parse(path, idx + 1, "bad height"))?;
    if w != h {
        return Err(IoError::parse(path, idx + 1, "grid must be square"));
    }
    if w != sidecar.resolution {
        return Err(IoError::parse(
            path,
            idx + 1,
            format!("grid is {w} wide but sidecar says {}", sidecar.resolution),
        ));
    }

    let mut z = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for (idx, line) in lines.take(h) {
        let lineno = idx + 1;
        let before = z.len();
        for field in line.split_whitespace() {
            if field == "nan" {
                z.push(0.0);
                mask.push(false);
            } else {
                let v = field
                    .parse::<f64>()
                    .map_err(|e| IoError::parse(path, lineno, format!("bad float: {e}")))?;
                z.push(v);
                mask.push(true);
            }
        }
        if z.len() - before != w {
            return Err(IoError::parse(
                path,
                lineno,
                format!("expected {w} values in row, found {}", z.len() - before),
            ));
        }
    }
    if z.len() != w * h {
        return Err(IoError::parse(
            path,
            2,
            format!("grid has {} values, expected {}", z.len(), w * h),
        ));
    }
    Ok(DepthMap {
        resolution: sidecar.resolution,
        scale: sidecar.scale,
        origin: sidecar.origin,
        z,
        mask,
    })
}
