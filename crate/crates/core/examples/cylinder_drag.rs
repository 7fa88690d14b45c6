//! Drag on a unit-diameter cylinder at a given grid resolution.
//!
//! `cargo run --release --example cylinder_drag -- 64`

use std::time::Instant;

use dragopt::flowsim::{divergence_max, simulate, FlowSetup};
use dragopt::shapegen::{fourier_smooth, sample_raw_shape, Point2};

fn main() {
    let resolution: f64 = std::env::args().nth(1).map(|s| s.parse().expect("resolution")).unwrap_or(64.0);
    let raw = sample_raw_shape(0, 16, 0.5, 0.5, Point2::new(1.25, 1.5)).expect("circle");
    let contour = fourier_smooth(&raw, 2, 256).expect("circle");
    let setup = FlowSetup { resolution, ..Default::default() };
    let t = Instant::now();
    let (rec, flow) = simulate(0, &contour, &setup).expect("simulation");
    println!(
        "res {resolution}: cd {:.6} lift/drag {:.2e} iters {} converged {} div {:.2e} time {:.1}s",
        rec.cd,
        (rec.f_lift / rec.f_drag).abs(),
        rec.iterations,
        rec.converged,
        divergence_max(&flow) * flow.grid.dx,
        t.elapsed().as_secs_f64()
    );
    let hist = &flow.residual_history;
    for k in (0..hist.len()).step_by((hist.len() / 20).max(1)) {
        println!("  step {k:>7} change {:.3e}", hist[k]);
    }
}
