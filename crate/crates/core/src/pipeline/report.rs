use std::fmt::Write as _;
use std::path::Path;

use super::campaign::{CampaignReport, REPORT_FILE};
use super::{write_file, PipelineError};
use crate::flowsim::{read_field_dump, FlowField};
use crate::numfmt::real;

pub const SUMMARY_FILE: &str = "summary.csv";

/// Velocity magnitude as 8-bit gray, scaled by the field maximum, top row
/// first. Returns `(width, height, pixels)` with the grid's dimensions.
pub fn render_speed(flow: &FlowField) -> (usize, usize, Vec<u8>) {
    let (nx, ny) = (flow.grid.nx, flow.grid.ny);
    let speed = flow.speed();
    let max = speed.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut px = Vec::with_capacity(nx * ny);
    for j in (0..ny).rev() {
        px.extend(speed[j * nx..(j + 1) * nx].iter().map(|&s| (s * scale).round().clamp(0.0, 255.0) as u8));
    }
    (nx, ny, px)
}

/// Binary portable pixmap with equal channels.
pub fn write_speed_ppm(path: &Path, flow: &FlowField) -> Result<(), PipelineError> {
    let (w, h, gray) = render_speed(flow);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(gray.iter().flat_map(|&g| [g, g, g]));
    write_file(path, out)
}

fn summary_csv(report: &CampaignReport) -> String {
    let mut s = String::from("rank,candidate,ei,cd,best_train_cd,improvement,image,contour\n");
    for (rank, c) in report.candidates.iter().enumerate() {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            rank + 1,
            c.candidate,
            real(c.ei),
            real(c.cd),
            real(report.best_train_cd),
            real(c.improvement),
            c.image,
            c.contour
        )
        .unwrap();
    }
    s
}

/// Writes `summary.csv` and `top{k}.ppm` renderings for a finished
/// campaign directory.
pub fn write_report(dir: &Path) -> Result<(), PipelineError> {
    if !dir.join(REPORT_FILE).exists() {
        return Err(PipelineError::Usage(format!("{} has no campaign report", dir.display())));
    }
    let report = CampaignReport::load(dir)?;
    write_file(&dir.join(SUMMARY_FILE), summary_csv(&report))?;
    for k in 1..=report.candidates.len().min(3) {
        let flow = read_field_dump(&dir.join(format!("fields/top{k}.f64")))?;
        write_speed_ppm(&dir.join(format!("top{k}.ppm")), &flow)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowsim::build_grid;
    use crate::pipeline::{CandidateOutcome, Timings};

    #[test]
    fn rendering_matches_grid_and_orientation() {
        let grid = build_grid(4.0, 3.0, 12.0).unwrap();
        let (nx, ny) = (grid.nx, grid.ny);
        let mut u = vec![0.0; grid.u_len()];
        // Unit flow in the top row only.
        for i in 0..=nx {
            u[(ny - 1) * (nx + 1) + i] = 1.0;
        }
        let flow = FlowField::from_arrays(grid, u, vec![0.0; nx * (ny + 1)], vec![0.0; nx * ny]);
        let (w, h, px) = render_speed(&flow);
        assert_eq!((w, h, px.len()), (nx, ny, nx * ny));
        assert!(px[..nx].iter().all(|&p| p == 255));
        assert!(px[nx..].iter().all(|&p| p == 0));
    }

    #[test]
    fn summary_has_header_plus_one_row_per_candidate() {
        let c = |k: usize, cd: f64| CandidateOutcome {
            candidate: k,
            ei: 0.5,
            cd,
            improvement: (2.0 - cd) / 2.0,
            iterations: 1,
            image: "i".into(),
            contour: "c".into(),
        };
        let r = CampaignReport {
            best_train_cd: 2.0,
            f_best: 0.0,
            starts: 4,
            converged_starts: 4,
            selected: 2,
            candidates: vec![c(1, 1.9), c(0, 2.1)],
            skipped: vec![],
            timings: Timings::default(),
        };
        let csv = summary_csv(&r);
        assert_eq!(csv.lines().count(), 3);
        for line in csv.lines().skip(1) {
            let f: Vec<f64> = line.split(',').skip(3).take(3).map(|v| v.parse().unwrap()).collect();
            assert!(((f[1] - f[0]) / f[1] - f[2]).abs() < 1e-12);
        }
    }
}
