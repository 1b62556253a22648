use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Point3;

/// Parses one `x y z` point (mm) per line; `#` starts a comment.
pub fn parse_landmarks(text: &str, path: &Path) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if fields.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 coordinates, found {}", n + 1, fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (a, f) in fields.iter().enumerate() {
            p[a] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path, format!("line {}: bad coordinate {f:?}", n + 1)))?;
        }
        points.push(p);
    }
    Ok(points)
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<Vec<Point3>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, path)
}

pub fn write_landmarks(points: &[Point3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in points {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
