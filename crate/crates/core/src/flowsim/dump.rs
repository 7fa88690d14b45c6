use std::fs;
use std::path::Path;

use super::{CellMask, FlowError, FlowField, Grid};

/// Header line `nx ny dx dy`, then `u`, `v`, `p` as little-endian f64.
pub fn write_field_dump(path: &Path, flow: &FlowField) -> Result<(), FlowError> {
    let g = &flow.grid;
    let mut out = format!("{} {} {:e} {:e}\n", g.nx, g.ny, g.dx, g.dy).into_bytes();
    out.reserve(8 * (flow.u.len() + flow.v.len() + flow.p.len()));
    for x in flow.u.iter().chain(&flow.v).chain(&flow.p) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| FlowError::Dump(e.to_string()))
}

/// Reads a dump back. The mask is not stored; solid cells are recovered as
/// those whose four faces all carry zero velocity and whose pressure is zero.
pub fn read_field_dump(path: &Path) -> Result<FlowField, FlowError> {
    let bytes = fs::read(path).map_err(|e| FlowError::Dump(e.to_string()))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| FlowError::Dump("missing header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| FlowError::Dump(e.to_string()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(FlowError::Dump(format!("bad header {header:?}")));
    }
    let bad = |e: String| FlowError::Dump(format!("bad header {header:?}: {e}"));
    let nx: usize = parts[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
    let ny: usize = parts[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
    let dx: f64 = parts[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
    let dy: f64 = parts[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
    let grid = Grid { nx, ny, dx, dy };
    let body = &bytes[nl + 1..];
    let total = grid.u_len() + grid.v_len() + grid.cells();
    if body.len() != 8 * total {
        return Err(FlowError::Dump(format!("expected {} bytes of data, found {}", 8 * total, body.len())));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let u = vals[..grid.u_len()].to_vec();
    let v = vals[grid.u_len()..grid.u_len() + grid.v_len()].to_vec();
    let p = vals[grid.u_len() + grid.v_len()..].to_vec();
    let mut flow = FlowField::from_arrays(grid, u, v, p);
    let mut solid = vec![false; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            solid[j * nx + i] = flow.u_at(i, j) == 0.0
                && flow.u_at(i + 1, j) == 0.0
                && flow.v_at(i, j) == 0.0
                && flow.v_at(i, j + 1) == 0.0
                && flow.p_at(i, j) == 0.0;
        }
    }
    flow.mask = CellMask::from_flags(nx, ny, solid);
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowsim::build_grid;

    #[test]
    fn dump_round_trip_is_bitwise() {
        let g = build_grid(1.0, 1.0, 32.0).unwrap();
        let u: Vec<f64> = (0..g.u_len()).map(|k| (k as f64).sin()).collect();
        let v: Vec<f64> = (0..g.v_len()).map(|k| (k as f64 * 0.3).cos()).collect();
        let p: Vec<f64> = (0..g.cells()).map(|k| k as f64 / 7.0).collect();
        let f = FlowField::from_arrays(g, u, v, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_field_dump(&path, &f).unwrap();
        let back = read_field_dump(&path).unwrap();
        assert_eq!(back.grid, f.grid);
        assert_eq!(back.u, f.u);
        assert_eq!(back.v, f.v);
        assert_eq!(back.p, f.p);
        let raw = fs::read(&path).unwrap();
        assert!(raw.starts_with(b"32 32 "));
    }

    #[test]
    fn truncated_dump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        fs::write(&path, b"32 32 0.03125 0.03125\n\x00\x00").unwrap();
        assert!(read_field_dump(&path).is_err());
    }
}
