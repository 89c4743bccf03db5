//! Plain-text XYZ point files: `x y z` or `x y z nx ny nz` per line.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const DEFAULT_PRECISION: usize = 9;

/// Normals further than this from unit length are renormalized with a warning.
const RENORMALIZE_TOLERANCE: f64 = 1e-3;

pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut fields_per_line = None;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(line_no, format!("not a finite number: {t:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 3 && values.len() != 6 {
            return Err(err(
                line_no,
                format!("expected 3 or 6 fields, found {}", values.len()),
            ));
        }
        match fields_per_line {
            None => fields_per_line = Some(values.len()),
            Some(n) if n != values.len() => {
                return Err(err(
                    line_no,
                    format!(
                        "expected {n} fields like earlier lines, found {}",
                        values.len()
                    ),
                ));
            }
            _ => {}
        }
        points.push(Point3::new(values[0], values[1], values[2]));
        if values.len() == 6 {
            let n = Vector3::new(values[3], values[4], values[5]);
            let len = n.norm();
            if len == 0.0 {
                return Err(err(line_no, "zero-length normal".into()));
            }
            if (len - 1.0).abs() > RENORMALIZE_TOLERANCE {
                log::warn!(
                    "{}:{line_no}: normal has length {len}, renormalized",
                    path.display()
                );
            }
            normals.push(n / len);
        }
    }
    if points.is_empty() {
        return Err(err(last_line.max(1), "no points".into()));
    }
    if normals.is_empty() {
        PointCloud::new(points)
    } else {
        PointCloud::with_normals(points, normals)
    }
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| with_path(e, path))?;
    parse_xyz(&text, path)
}

pub(crate) fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub fn format_xyz(cloud: &PointCloud, precision: usize) -> String {
    let mut s = String::with_capacity(cloud.len() * (3 * (precision + 8)));
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(
            s,
            "{:.*e} {:.*e} {:.*e}",
            precision, p.x, precision, p.y, precision, p.z
        );
        if let Some(ns) = cloud.normals() {
            let n = ns[i];
            let _ = write!(
                s,
                " {:.*e} {:.*e} {:.*e}",
                precision, n.x, precision, n.y, precision, n.z
            );
        }
        s.push('\n');
    }
    s
}

/// Refuses empty clouds without touching the file system.
pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>, precision: usize) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput);
    }
    let path = path.as_ref();
    std::fs::write(path, format_xyz(cloud, precision)).map_err(|e| with_path(e, path))?;
    Ok(())
}
