use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

const HEADER: &str = "x,y,z";

/// Writes `x,y,z` rows in mm with 17 significant digits (lossless for f64).
pub fn write_points_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(64 * (cloud.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for p in &cloud.points {
        let _ = writeln!(out, "{:.16e},{:.16e},{:.16e}", p.x, p.y, p.z);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_points_csv(path: impl AsRef<Path>, frame_label: &str) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        other => {
            return Err(Error::format(
                "header",
                format!("expected `{HEADER}`, found {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        let coords: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("row {}", n + 1), e.to_string()))?;
        if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::format(format!("row {}", n + 1), "expected three finite values"));
        }
        points.push(Point3::new(coords[0], coords[1], coords[2]));
    }
    Ok(PointCloud::new(points, frame_label))
}
