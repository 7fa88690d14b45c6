use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Point2, ShapeContour, ShapeError};

/// One `x y` pair per line, counter-clockwise, not explicitly closed.
/// Seventeen decimals make the text form round-trip bit-exactly.
pub fn write_contour(path: &Path, contour: &ShapeContour) -> Result<(), ShapeError> {
    let mut out = Vec::with_capacity(contour.polyline().len() * 44);
    for p in contour.polyline() {
        writeln!(out, "{:.17} {:.17}", p.x, p.y)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_contour(path: &Path) -> Result<ShapeContour, ShapeError> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = || -> Result<f64, ShapeError> {
            it.next()
                .ok_or_else(|| ShapeError::Parse(format!("line {}: expected two values", lineno + 1)))?
                .parse::<f64>()
                .map_err(|e| ShapeError::Parse(format!("line {}: {e}", lineno + 1)))
        };
        let (x, y) = (next()?, next()?);
        pts.push(Point2::new(x, y));
    }
    ShapeContour::from_polyline(pts)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_shape, ShapeConfig};
    use super::*;

    #[test]
    fn contour_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let g = generate_shape(3, &ShapeConfig::default()).unwrap();
        write_contour(&path, &g.contour).unwrap();
        let back = read_contour(&path).unwrap();
        assert_eq!(back.polyline(), g.contour.polyline());
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "1.0 2.0\n3.0\n").unwrap();
        assert!(matches!(read_contour(&path), Err(ShapeError::Parse(_))));
    }
}
