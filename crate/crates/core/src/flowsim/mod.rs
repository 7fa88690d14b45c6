//! Steady 2D incompressible laminar flow around a masked object on a
//! staggered Cartesian grid, and the resulting drag.
//!
//! Velocities live on cell faces (`u` on vertical faces, `v` on horizontal
//! faces) and pressure at cell centers. The object is a stair-step set of
//! solid cells; every face touching a solid cell carries zero velocity.

mod dump;
mod forces;
mod solver;

use thiserror::Error;

use crate::shapegen::components_on;
use crate::shapegen::{frontal_area, point_in_polygon, Connectivity, Point2, ShapeContour, ShapeError};

pub use dump::{read_field_dump, write_field_dump};
pub use forces::{drag_coefficient, drag_force};
pub use solver::solve_steady;

/// Solid cells must stay this many cells away from every wall.
pub const WALL_CLEARANCE_CELLS: usize = 4;
pub const MIN_GRID_CELLS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("grid {nx}x{ny} below the {MIN_GRID_CELLS}-cell minimum")]
    GridTooSmall { nx: usize, ny: usize },
    #[error("cells are not square after rounding (dx={dx}, dy={dy})")]
    NonSquareCells { dx: f64, dy: f64 },
    #[error("invalid fluid parameters: {0}")]
    InvalidParams(String),
    #[error("object closer than {WALL_CLEARANCE_CELLS} cells to a wall")]
    Clearance,
    #[error("object spans fewer than {WALL_CLEARANCE_CELLS} cells or covers no cell center")]
    EmptyMask,
    #[error("solid cells form {0} components")]
    FragmentedMask(usize),
    #[error("mask does not match grid {0}x{1}")]
    MaskMismatch(usize, usize),
    #[error("iteration diverged at step {iteration}: |v|max={vmax:.3e}, dt={dt:.3e}")]
    Diverged { iteration: usize, vmax: f64, dt: f64 },
    #[error("pressure solve failed: {0}")]
    Poisson(String),
    #[error("flow field is not converged")]
    NotConverged,
    #[error("frontal area must be positive, got {0}")]
    NonPositiveArea(f64),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("field dump: {0}")]
    Dump(String),
}

/// Density, kinematic viscosity and inlet speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidParams {
    pub rho: f64,
    pub nu: f64,
    pub v_in: f64,
}

impl Default for FluidParams {
    fn default() -> Self {
        Self { rho: 1.0, nu: 0.02, v_in: 1.0 }
    }
}

impl FluidParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.rho > 0.0 && self.nu > 0.0 && self.v_in > 0.0 && self.rho.is_finite() && self.nu.is_finite() && self.v_in.is_finite() {
            Ok(())
        } else {
            Err(FlowError::InvalidParams(format!("{self:?}")))
        }
    }

    /// Dynamic viscosity `η = ρ ν`.
    pub fn eta(&self) -> f64 {
        self.rho * self.nu
    }

    pub fn reynolds(&self, length: f64) -> f64 {
        self.v_in * length / self.nu
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Grid {
    pub fn lx(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn ly(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point2 {
        Point2::new((i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dy)
    }

    pub fn u_len(&self) -> usize {
        (self.nx + 1) * self.ny
    }

    pub fn v_len(&self) -> usize {
        self.nx * (self.ny + 1)
    }
}

/// Square-cell grid over `[0, lx] × [0, ly]` with `resolution` cells per
/// unit length.
pub fn build_grid(lx: f64, ly: f64, resolution: f64) -> Result<Grid, FlowError> {
    let nx = (lx * resolution).round() as usize;
    let ny = (ly * resolution).round() as usize;
    if nx < MIN_GRID_CELLS || ny < MIN_GRID_CELLS {
        return Err(FlowError::GridTooSmall { nx, ny });
    }
    let dx = lx / nx as f64;
    let dy = ly / ny as f64;
    if (dx - dy).abs() > 1e-12 * dx {
        return Err(FlowError::NonSquareCells { dx, dy });
    }
    Ok(Grid { nx, ny, dx, dy: dx })
}

/// Per-cell solid flags, row-major with `j = 0` at the bottom wall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    pub nx: usize,
    pub ny: usize,
    solid: Vec<bool>,
}

impl CellMask {
    pub fn empty(grid: &Grid) -> Self {
        Self { nx: grid.nx, ny: grid.ny, solid: vec![false; grid.cells()] }
    }

    pub fn from_flags(nx: usize, ny: usize, solid: Vec<bool>) -> Self {
        assert_eq!(solid.len(), nx * ny);
        Self { nx, ny, solid }
    }

    #[inline]
    pub fn is_solid(&self, i: usize, j: usize) -> bool {
        self.solid[j * self.nx + i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.solid
    }

    pub fn solid_count(&self) -> usize {
        self.solid.iter().filter(|&&s| s).count()
    }

    /// Reflection about the horizontal centerline.
    pub fn mirrored_y(&self) -> Self {
        let mut solid = vec![false; self.solid.len()];
        for j in 0..self.ny {
            for i in 0..self.nx {
                solid[j * self.nx + i] = self.is_solid(i, self.ny - 1 - j);
            }
        }
        Self { nx: self.nx, ny: self.ny, solid }
    }

    fn matches(&self, grid: &Grid) -> Result<(), FlowError> {
        if self.nx == grid.nx && self.ny == grid.ny {
            Ok(())
        } else {
            Err(FlowError::MaskMismatch(self.nx, self.ny))
        }
    }
}

/// Marks every cell whose center lies inside the contour as solid.
///
/// Fluid pockets that are cut off from the surrounding flow are filled, so
/// the fluid region is always connected.
pub fn mask_object(grid: &Grid, contour: &ShapeContour) -> Result<CellMask, FlowError> {
    let (lo, hi) = contour.bounds();
    let margin = WALL_CLEARANCE_CELLS as f64 * grid.dx;
    if lo.x < margin || lo.y < margin || hi.x > grid.lx() - margin || hi.y > grid.ly() - margin {
        return Err(FlowError::Clearance);
    }
    if hi.x - lo.x < margin || hi.y - lo.y < margin {
        return Err(FlowError::EmptyMask);
    }
    let poly = contour.polyline();
    let (nx, ny) = (grid.nx, grid.ny);
    let mut solid = vec![false; nx * ny];
    for j in 0..ny {
        let y = (j as f64 + 0.5) * grid.dy;
        if y < lo.y || y > hi.y {
            continue;
        }
        for i in 0..nx {
            let x = (i as f64 + 0.5) * grid.dx;
            if x < lo.x || x > hi.x {
                continue;
            }
            solid[j * nx + i] = point_in_polygon(Point2::new(x, y), poly);
        }
    }
    fill_enclosed_fluid(nx, ny, &mut solid);
    let comps = components_on(&solid, nx, ny, Connectivity::Four).len();
    match comps {
        0 => Err(FlowError::EmptyMask),
        1 => Ok(CellMask { nx, ny, solid }),
        n => Err(FlowError::FragmentedMask(n)),
    }
}

fn fill_enclosed_fluid(nx: usize, ny: usize, solid: &mut [bool]) {
    let mut reached = vec![false; nx * ny];
    let mut stack: Vec<usize> = Vec::new();
    for i in 0..nx {
        stack.push(i);
        stack.push((ny - 1) * nx + i);
    }
    for j in 0..ny {
        stack.push(j * nx);
        stack.push(j * nx + nx - 1);
    }
    while let Some(c) = stack.pop() {
        if solid[c] || reached[c] {
            continue;
        }
        reached[c] = true;
        let (i, j) = (c % nx, c / nx);
        if i > 0 {
            stack.push(c - 1);
        }
        if i + 1 < nx {
            stack.push(c + 1);
        }
        if j > 0 {
            stack.push(c - nx);
        }
        if j + 1 < ny {
            stack.push(c + nx);
        }
    }
    for c in 0..nx * ny {
        if !reached[c] {
            solid[c] = true;
        }
    }
}

/// Solver controls. Defaults follow the CFL rule
/// `dt = cfl · min(dx/|v|max, dx²/(4ν))` with `cfl = 0.4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Converged when the relative per-step change of `(u, v)` drops below this.
    pub steady_tol: f64,
    pub max_iters: usize,
    pub cfl: f64,
    /// Abort once `|v|max` exceeds this multiple of the inlet speed.
    pub blowup_factor: f64,
    /// Relative residual required of each pressure solve.
    pub poisson_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { steady_tol: 1e-6, max_iters: 200_000, cfl: 0.4, blowup_factor: 1e3, poisson_tol: 1e-8 }
    }
}

/// Staggered velocity and cell-centered pressure.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub grid: Grid,
    pub mask: CellMask,
    /// `(nx + 1) × ny`, index `j (nx + 1) + i`; face `i` sits at `x = i dx`.
    pub u: Vec<f64>,
    /// `nx × (ny + 1)`, index `j nx + i`; face `j` sits at `y = j dy`.
    pub v: Vec<f64>,
    /// `nx × ny`, zero mean over fluid cells, zero in solid cells.
    pub p: Vec<f64>,
    /// Relative change of `(u, v)` at every step.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl FlowField {
    /// Field with the given arrays on an object-free grid, e.g. for
    /// analytic checks.
    pub fn from_arrays(grid: Grid, u: Vec<f64>, v: Vec<f64>, p: Vec<f64>) -> Self {
        assert_eq!(u.len(), grid.u_len());
        assert_eq!(v.len(), grid.v_len());
        assert_eq!(p.len(), grid.cells());
        Self { mask: CellMask::empty(&grid), grid, u, v, p, residual_history: Vec::new(), converged: true, iterations: 0 }
    }

    #[inline]
    pub fn u_at(&self, i: usize, j: usize) -> f64 {
        self.u[j * (self.grid.nx + 1) + i]
    }

    #[inline]
    pub fn v_at(&self, i: usize, j: usize) -> f64 {
        self.v[j * self.grid.nx + i]
    }

    #[inline]
    pub fn p_at(&self, i: usize, j: usize) -> f64 {
        self.p[j * self.grid.nx + i]
    }

    /// Discrete divergence of cell `(i, j)`.
    pub fn divergence(&self, i: usize, j: usize) -> f64 {
        (self.u_at(i + 1, j) - self.u_at(i, j)) / self.grid.dx + (self.v_at(i, j + 1) - self.v_at(i, j)) / self.grid.dy
    }

    /// Velocity magnitude at cell centers (zero in solid cells), row-major
    /// from the bottom row.
    pub fn speed(&self) -> Vec<f64> {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut out = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                if self.mask.is_solid(i, j) {
                    continue;
                }
                let uc = 0.5 * (self.u_at(i, j) + self.u_at(i + 1, j));
                let vc = 0.5 * (self.v_at(i, j) + self.v_at(i, j + 1));
                out[j * nx + i] = uc.hypot(vc);
            }
        }
        out
    }
}

/// Maximum absolute discrete divergence over fluid cells.
pub fn divergence_max(flow: &FlowField) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..flow.grid.ny {
        for i in 0..flow.grid.nx {
            if !flow.mask.is_solid(i, j) {
                m = m.max(flow.divergence(i, j).abs());
            }
        }
    }
    m
}

/// Domain, resolution, fluid and solver settings shared by every
/// simulation of a dataset or campaign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSetup {
    pub lx: f64,
    pub ly: f64,
    pub resolution: f64,
    pub params: FluidParams,
    pub solver: SolverConfig,
}

impl Default for FlowSetup {
    fn default() -> Self {
        Self { lx: 4.0, ly: 3.0, resolution: 64.0, params: FluidParams::default(), solver: SolverConfig::default() }
    }
}

/// Outcome of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct DragRecord {
    pub shape_id: u64,
    /// Frontal length `A` (transverse extent).
    pub frontal: f64,
    pub f_drag: f64,
    pub f_lift: f64,
    pub cd: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Masks, solves and integrates forces for one contour. Unconverged runs
/// yield a record with `converged = false` and NaN forces.
pub fn simulate(shape_id: u64, contour: &ShapeContour, setup: &FlowSetup) -> Result<(DragRecord, FlowField), FlowError> {
    let grid = build_grid(setup.lx, setup.ly, setup.resolution)?;
    let mask = mask_object(&grid, contour)?;
    let frontal = frontal_area(contour)?;
    let flow = solve_steady(&grid, &mask, &setup.params, &setup.solver)?;
    let record = if flow.converged {
        let (f_drag, f_lift) = drag_force(&flow, &mask, &setup.params)?;
        let cd = drag_coefficient(f_drag, &setup.params, frontal)?;
        DragRecord { shape_id, frontal, f_drag, f_lift, cd, converged: true, iterations: flow.iterations }
    } else {
        DragRecord {
            shape_id,
            frontal,
            f_drag: f64::NAN,
            f_lift: f64::NAN,
            cd: f64::NAN,
            converged: false,
            iterations: flow.iterations,
        }
    };
    Ok((record, flow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapegen::{fourier_smooth, sample_raw_shape};
    use std::f64::consts::PI;

    pub(crate) fn circle(center: Point2, radius: f64) -> ShapeContour {
        let raw = sample_raw_shape(0, 16, radius, radius, center).unwrap();
        fourier_smooth(&raw, 2, 256).unwrap()
    }

    #[test]
    fn grid_sizes() {
        let g = build_grid(4.0, 3.0, 64.0).unwrap();
        assert_eq!((g.nx, g.ny), (256, 192));
        assert_eq!(g.dx, g.dy);
        assert!(matches!(build_grid(4.0, 3.0, 8.0), Err(FlowError::GridTooSmall { ny: 24, .. })));
        let g2 = build_grid(4.0, 3.0, 128.0).unwrap();
        assert_eq!(g2.cells(), 4 * g.cells());
    }

    #[test]
    fn non_square_cells_are_rejected() {
        assert!(matches!(build_grid(4.0, 3.01, 16.0), Err(FlowError::NonSquareCells { .. })));
    }

    #[test]
    fn circle_mask_area() {
        let g = build_grid(4.0, 3.0, 64.0).unwrap();
        let m = mask_object(&g, &circle(Point2::new(1.25, 1.5), 0.5)).unwrap();
        let expected = PI * 0.25 * 64.0 * 64.0;
        let got = m.solid_count() as f64;
        assert!((got - expected).abs() / expected < 0.03, "{got} vs {expected}");
    }

    #[test]
    fn mask_rejects_wall_proximity_and_tiny_objects() {
        let g = build_grid(4.0, 3.0, 64.0).unwrap();
        assert_eq!(mask_object(&g, &circle(Point2::new(0.52, 1.5), 0.5)), Err(FlowError::Clearance));
        assert_eq!(mask_object(&g, &circle(Point2::new(2.0, 1.5), 0.02)), Err(FlowError::EmptyMask));
    }

    #[test]
    fn mirrored_mask_round_trips() {
        let g = build_grid(4.0, 3.0, 32.0).unwrap();
        let m = mask_object(&g, &circle(Point2::new(1.25, 1.7), 0.4)).unwrap();
        assert_ne!(m, m.mirrored_y());
        assert_eq!(m, m.mirrored_y().mirrored_y());
    }

    fn synthetic(g: Grid, fu: impl Fn(f64, f64) -> f64, fv: impl Fn(f64, f64) -> f64) -> FlowField {
        let mut u = vec![0.0; g.u_len()];
        let mut v = vec![0.0; g.v_len()];
        for j in 0..g.ny {
            for i in 0..=g.nx {
                u[j * (g.nx + 1) + i] = fu(i as f64 * g.dx, (j as f64 + 0.5) * g.dy);
            }
        }
        for j in 0..=g.ny {
            for i in 0..g.nx {
                v[j * g.nx + i] = fv((i as f64 + 0.5) * g.dx, j as f64 * g.dy);
            }
        }
        FlowField::from_arrays(g, u, v, vec![0.0; g.cells()])
    }

    #[test]
    fn divergence_of_analytic_fields() {
        let g = build_grid(2.0, 2.0, 16.0).unwrap();
        assert_eq!(divergence_max(&synthetic(g, |_, _| 1.0, |_, _| 0.0)), 0.0);
        assert!(divergence_max(&synthetic(g, |_, y| y, |_, _| 0.0)) < 1e-12);
        let d = divergence_max(&synthetic(g, |x, _| x, |_, _| 0.0));
        assert!((d - 1.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn fluid_params_validation() {
        assert!(FluidParams::default().validate().is_ok());
        assert!(FluidParams { nu: 0.0, ..Default::default() }.validate().is_err());
        assert!((FluidParams::default().reynolds(1.0) - 50.0).abs() < 1e-12);
    }
}
