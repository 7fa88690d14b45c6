use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::cholesky::{factorize_symbolic_cholesky, CholeskySymbolicParams, LltRef, SymbolicCholesky, SymmetricOrdering};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Par, Side};

use super::{CellMask, FlowError, FlowField, FluidParams, Grid, SolverConfig};

/// Neighbor value `coef * field[idx]`. Ghost values across walls are
/// expressed through `idx = self` with `coef` in `{-1, 0, 1}`.
#[derive(Clone, Copy)]
struct Nb {
    idx: u32,
    coef: f64,
}

impl Nb {
    fn direct(idx: usize) -> Self {
        Self { idx: idx as u32, coef: 1.0 }
    }

    fn ghost(self_idx: usize, coef: f64) -> Self {
        Self { idx: self_idx as u32, coef }
    }

    #[inline]
    fn get(self, f: &[f64]) -> f64 {
        self.coef * f[self.idx as usize]
    }
}

/// Stencil of one free face: four same-component neighbors plus the four
/// cross-component faces averaged to this location.
#[derive(Clone, Copy)]
struct FaceStencil {
    idx: u32,
    e: Nb,
    w: Nb,
    n: Nb,
    s: Nb,
    cross: [u32; 4],
    /// Cells on either side along the face normal (minus, plus), as
    /// pressure unknown indices.
    cm: u32,
    cp: u32,
}

struct Layout {
    nx: usize,
    ny: usize,
    u_faces: Vec<FaceStencil>,
    v_faces: Vec<FaceStencil>,
    /// Cell index -> pressure unknown, `u32::MAX` for solid cells.
    unknown: Vec<u32>,
    fluid_cells: Vec<usize>,
}

impl Layout {
    #[inline]
    fn iu(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    #[inline]
    fn iv(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    fn new(mask: &CellMask) -> Self {
        let (nx, ny) = (mask.nx, mask.ny);
        let solid = |i: usize, j: usize| mask.is_solid(i, j);
        // A u face at column i touches cells i-1 and i; a v face at row j
        // touches rows j-1 and j.
        let u_blocked = |i: usize, j: usize| (i > 0 && solid(i - 1, j)) || (i < nx && solid(i, j));
        let u_walled = |i: usize, j: usize| (i > 0 && solid(i - 1, j)) && (i < nx && solid(i, j));
        let v_blocked = |i: usize, j: usize| (j > 0 && solid(i, j - 1)) || (j < ny && solid(i, j));
        let v_walled = |i: usize, j: usize| (j > 0 && solid(i, j - 1)) && (j < ny && solid(i, j));

        let mut unknown = vec![u32::MAX; nx * ny];
        let mut fluid_cells = Vec::new();
        for c in 0..nx * ny {
            if !mask.flags()[c] {
                unknown[c] = fluid_cells.len() as u32;
                fluid_cells.push(c);
            }
        }
        let mut lay = Self { nx, ny, u_faces: Vec::new(), v_faces: Vec::new(), unknown, fluid_cells };

        // Tangential neighbor across a solid-adjacent face: mirror ghost when
        // the neighbor face lies inside a wall, the stored zero otherwise.
        let tangential = |own: usize, other: usize, blocked: bool, walled: bool| {
            if walled {
                Nb::ghost(own, -1.0)
            } else if blocked {
                Nb::ghost(own, 0.0)
            } else {
                Nb::direct(other)
            }
        };

        for j in 0..ny {
            for i in 1..nx {
                if u_blocked(i, j) {
                    continue;
                }
                let me = lay.iu(i, j);
                let n = if j + 1 == ny {
                    Nb::ghost(me, 1.0)
                } else {
                    tangential(me, lay.iu(i, j + 1), u_blocked(i, j + 1), u_walled(i, j + 1))
                };
                let s = if j == 0 {
                    Nb::ghost(me, 1.0)
                } else {
                    tangential(me, lay.iu(i, j - 1), u_blocked(i, j - 1), u_walled(i, j - 1))
                };
                lay.u_faces.push(FaceStencil {
                    idx: me as u32,
                    e: Nb::direct(lay.iu(i + 1, j)),
                    w: Nb::direct(lay.iu(i - 1, j)),
                    n,
                    s,
                    cross: [
                        lay.iv(i - 1, j) as u32,
                        lay.iv(i, j) as u32,
                        lay.iv(i - 1, j + 1) as u32,
                        lay.iv(i, j + 1) as u32,
                    ],
                    cm: lay.unknown[j * nx + i - 1],
                    cp: lay.unknown[j * nx + i],
                });
            }
        }
        for j in 1..ny {
            for i in 0..nx {
                if v_blocked(i, j) {
                    continue;
                }
                let me = lay.iv(i, j);
                // Inlet: v = 0 on the wall, so the ghost mirrors. Outlet:
                // zero gradient.
                let w = if i == 0 {
                    Nb::ghost(me, -1.0)
                } else {
                    tangential(me, lay.iv(i - 1, j), v_blocked(i - 1, j), v_walled(i - 1, j))
                };
                let e = if i + 1 == nx {
                    Nb::ghost(me, 1.0)
                } else {
                    tangential(me, lay.iv(i + 1, j), v_blocked(i + 1, j), v_walled(i + 1, j))
                };
                lay.v_faces.push(FaceStencil {
                    idx: me as u32,
                    e,
                    w,
                    n: Nb::direct(lay.iv(i, j + 1)),
                    s: Nb::direct(lay.iv(i, j - 1)),
                    cross: [
                        lay.iu(i, j - 1) as u32,
                        lay.iu(i + 1, j - 1) as u32,
                        lay.iu(i, j) as u32,
                        lay.iu(i + 1, j) as u32,
                    ],
                    cm: lay.unknown[(j - 1) * nx + i],
                    cp: lay.unknown[j * nx + i],
                });
            }
        }
        lay
    }
}

/// Graph Laplacian of the fluid cells with homogeneous Neumann conditions
/// everywhere, unknown 0 pinned to remove the constant null space.
struct Poisson {
    symbolic: SymbolicCholesky<usize>,
    factor: Vec<f64>,
    scratch: MemBuffer,
    n: usize,
    /// Lower-triangle entries `(row, col, value)` over all unknowns, for
    /// residual checks.
    entries: Vec<(usize, usize, f64)>,
}

impl Poisson {
    fn new(lay: &Layout) -> Result<Self, FlowError> {
        let (nx, ny) = (lay.nx, lay.ny);
        let n = lay.fluid_cells.len();
        if n < 2 {
            return Err(FlowError::Poisson("fewer than two fluid cells".into()));
        }
        let mut entries = Vec::with_capacity(3 * n);
        for (k, &c) in lay.fluid_cells.iter().enumerate() {
            let (i, j) = (c % nx, c / nx);
            let mut diag = 0.0;
            let mut link = |other: usize| {
                let o = lay.unknown[other];
                if o != u32::MAX {
                    diag += 1.0;
                    if (o as usize) < k {
                        entries.push((k, o as usize, -1.0));
                    }
                }
            };
            if i > 0 {
                link(c - 1);
            }
            if i + 1 < nx {
                link(c + 1);
            }
            if j > 0 {
                link(c - nx);
            }
            if j + 1 < ny {
                link(c + nx);
            }
            entries.push((k, k, diag));
        }
        let reduced: Vec<Triplet<usize, usize, f64>> = entries
            .iter()
            .filter(|&&(r, c, _)| r > 0 && c > 0)
            .map(|&(r, c, v)| Triplet::new(r - 1, c - 1, v))
            .collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(n - 1, n - 1, &reduced)
            .map_err(|e| FlowError::Poisson(format!("{e:?}")))?;
        let err = |e: &dyn std::fmt::Debug| FlowError::Poisson(format!("{e:?}"));
        let symbolic = factorize_symbolic_cholesky(a.symbolic(), Side::Lower, SymmetricOrdering::Amd, CholeskySymbolicParams::default())
            .map_err(|e| err(&e))?;
        let mut factor = vec![0.0; symbolic.len_val()];
        let req = symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default());
        symbolic
            .factorize_numeric_llt(
                &mut factor,
                a.as_ref(),
                Side::Lower,
                Default::default(),
                Par::Seq,
                MemStack::new(&mut MemBuffer::new(req)),
                Default::default(),
            )
            .map_err(|e| err(&e))?;
        let scratch = MemBuffer::new(symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
        Ok(Self { symbolic, factor, scratch, n, entries })
    }

    /// Solves `A φ = rhs` in place with `φ[0] = 0`. The right-hand side is
    /// first projected onto the range of the singular operator (zero sum).
    fn solve(&mut self, rhs: &mut [f64], buf: &mut Mat<f64>, tol: f64) -> Result<(), FlowError> {
        let mean = rhs.iter().sum::<f64>() / self.n as f64;
        for r in rhs.iter_mut() {
            *r -= mean;
        }
        for k in 1..self.n {
            buf[(k - 1, 0)] = rhs[k];
        }
        LltRef::new(&self.symbolic, &self.factor).solve_in_place_with_conj(Conj::No, buf.as_mut(), Par::Seq, MemStack::new(&mut self.scratch));
        let rhs_norm = rhs.iter().map(|r| r * r).sum::<f64>().sqrt();
        let mut phi = vec![0.0; self.n];
        for k in 1..self.n {
            phi[k] = buf[(k - 1, 0)];
        }
        let res = self.residual(&phi, rhs);
        if !(res <= tol * rhs_norm.max(f64::MIN_POSITIVE)) && rhs_norm > 0.0 {
            return Err(FlowError::Poisson(format!("relative residual {:.3e}", res / rhs_norm)));
        }
        rhs.copy_from_slice(&phi);
        Ok(())
    }

    fn residual(&self, phi: &[f64], rhs: &[f64]) -> f64 {
        let mut r: Vec<f64> = rhs.iter().map(|&b| -b).collect();
        for &(i, j, v) in &self.entries {
            r[i] += v * phi[j];
            if i != j {
                r[j] += v * phi[i];
            }
        }
        r.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Marches the incompressible equations in pseudo-time until the velocity
/// stops changing.
///
/// Each step advects with first-order upwinding, diffuses with the central
/// five-point Laplacian, and projects onto discretely divergence-free
/// fields. The pressure system is factored once and reused. A run that
/// reaches `max_iters` returns with `converged = false`.
pub fn solve_steady(grid: &Grid, mask: &CellMask, params: &FluidParams, cfg: &SolverConfig) -> Result<FlowField, FlowError> {
    params.validate()?;
    mask.matches(grid)?;
    let (nx, ny) = (grid.nx, grid.ny);
    let h = grid.dx;
    let lay = Layout::new(mask);
    let mut poisson = Poisson::new(&lay)?;
    let n_fluid = lay.fluid_cells.len();

    let mut u = vec![0.0; grid.u_len()];
    let mut v = vec![0.0; grid.v_len()];
    // Start from the inlet profile everywhere except on blocked faces.
    for f in &lay.u_faces {
        u[f.idx as usize] = params.v_in;
    }
    for j in 0..ny {
        u[lay.iu(0, j)] = params.v_in;
        u[lay.iu(nx, j)] = params.v_in;
    }
    let mut us = u.clone();
    let mut vs = v.clone();
    let mut rhs = vec![0.0; n_fluid];
    let mut buf = Mat::<f64>::zeros(n_fluid - 1, 1);
    let mut history = Vec::new();
    let inflow: f64 = (0..ny).map(|j| u[lay.iu(0, j)]).sum();
    let nu = params.nu;
    let inv_h = 1.0 / h;
    let inv_h2 = inv_h * inv_h;
    let dt_diff = h * h / (4.0 * nu);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..cfg.max_iters {
        let vmax = u.iter().chain(v.iter()).fold(params.v_in, |m, x| m.max(x.abs()));
        let dt = cfg.cfl * (h / vmax).min(dt_diff);

        for f in &lay.u_faces {
            let k = f.idx as usize;
            let uc = u[k];
            let (ue, uw, un, us_) = (f.e.get(&u), f.w.get(&u), f.n.get(&u), f.s.get(&u));
            let vb = 0.25 * (v[f.cross[0] as usize] + v[f.cross[1] as usize] + v[f.cross[2] as usize] + v[f.cross[3] as usize]);
            let dudx = if uc > 0.0 { uc - uw } else { ue - uc };
            let dudy = if vb > 0.0 { uc - us_ } else { un - uc };
            let adv = (uc * dudx + vb * dudy) * inv_h;
            let lap = (ue + uw + un + us_ - 4.0 * uc) * inv_h2;
            us[k] = uc + dt * (nu * lap - adv);
        }
        for f in &lay.v_faces {
            let k = f.idx as usize;
            let vc = v[k];
            let (ve, vw, vn, vs_) = (f.e.get(&v), f.w.get(&v), f.n.get(&v), f.s.get(&v));
            let ub = 0.25 * (u[f.cross[0] as usize] + u[f.cross[1] as usize] + u[f.cross[2] as usize] + u[f.cross[3] as usize]);
            let dvdx = if ub > 0.0 { vc - vw } else { ve - vc };
            let dvdy = if vc > 0.0 { vc - vs_ } else { vn - vc };
            let adv = (ub * dvdx + vc * dvdy) * inv_h;
            let lap = (ve + vw + vn + vs_ - 4.0 * vc) * inv_h2;
            vs[k] = vc + dt * (nu * lap - adv);
        }
        // Outlet: zero gradient, then a uniform shift so that outflow
        // balances inflow and the pressure system is solvable.
        let mut outflow = 0.0;
        for j in 0..ny {
            let val = us[lay.iu(nx - 1, j)];
            us[lay.iu(nx, j)] = val;
            outflow += val;
        }
        let shift = (inflow - outflow) / ny as f64;
        for j in 0..ny {
            us[lay.iu(nx, j)] += shift;
        }

        let scale = -h / dt;
        for (k, &c) in lay.fluid_cells.iter().enumerate() {
            let (i, j) = (c % nx, c / nx);
            let div = us[lay.iu(i + 1, j)] - us[lay.iu(i, j)] + vs[lay.iv(i, j + 1)] - vs[lay.iv(i, j)];
            rhs[k] = scale * div;
        }
        poisson.solve(&mut rhs, &mut buf, cfg.poisson_tol)?;
        let corr = dt * inv_h;
        for f in &lay.u_faces {
            let k = f.idx as usize;
            us[k] -= corr * (rhs[f.cp as usize] - rhs[f.cm as usize]);
        }
        for f in &lay.v_faces {
            let k = f.idx as usize;
            vs[k] -= corr * (rhs[f.cp as usize] - rhs[f.cm as usize]);
        }

        let mut diff = 0.0;
        let mut norm = 0.0;
        let mut new_max: f64 = 0.0;
        for (a, b) in us.iter().zip(&u).chain(vs.iter().zip(&v)) {
            diff += (a - b) * (a - b);
            norm += a * a;
            new_max = new_max.max(a.abs());
        }
        std::mem::swap(&mut u, &mut us);
        std::mem::swap(&mut v, &mut vs);
        iterations = it + 1;
        if !new_max.is_finite() || new_max > cfg.blowup_factor * params.v_in {
            return Err(FlowError::Diverged { iteration: iterations, vmax: new_max, dt });
        }
        let rel = if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() };
        history.push(rel);
        if rel < cfg.steady_tol {
            converged = true;
            // Pressure of the final step: phi approximates p / rho.
            break;
        }
    }

    let mut p = vec![0.0; nx * ny];
    let mean = rhs.iter().sum::<f64>() / n_fluid as f64;
    for (k, &c) in lay.fluid_cells.iter().enumerate() {
        p[c] = params.rho * (rhs[k] - mean);
    }
    Ok(FlowField { grid: *grid, mask: mask.clone(), u, v, p, residual_history: history, converged, iterations })
}

#[cfg(test)]
mod tests {
    use super::super::{divergence_max, mask_object, tests::circle};
    use super::*;
    use crate::flowsim::build_grid;
    use crate::shapegen::Point2;

    #[test]
    fn empty_domain_stays_uniform() {
        let g = build_grid(2.0, 1.0, 32.0).unwrap();
        let params = FluidParams::default();
        let f = solve_steady(&g, &CellMask::empty(&g), &params, &SolverConfig::default()).unwrap();
        assert!(f.converged);
        for &x in &f.u {
            assert!((x - 1.0).abs() < 1e-8);
        }
        for &x in f.v.iter().chain(&f.p) {
            assert!(x.abs() < 1e-8);
        }
    }

    #[test]
    fn small_obstacle_converges_divergence_free() {
        let g = build_grid(4.0, 3.0, 16.0).unwrap();
        let mask = mask_object(&g, &circle(Point2::new(1.25, 1.5), 0.5)).unwrap();
        let cfg = SolverConfig { steady_tol: 1e-7, ..Default::default() };
        let f = solve_steady(&g, &mask, &FluidParams::default(), &cfg).unwrap();
        assert!(f.converged, "{} iterations", f.iterations);
        assert!(divergence_max(&f) < 1e-6 / g.dx);
        // Blocked faces hold zero velocity.
        for j in 0..g.ny {
            for i in 1..g.nx {
                if mask.is_solid(i - 1, j) || mask.is_solid(i, j) {
                    assert_eq!(f.u_at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn iteration_cap_reports_unconverged() {
        let g = build_grid(4.0, 3.0, 16.0).unwrap();
        let mask = mask_object(&g, &circle(Point2::new(1.25, 1.5), 0.5)).unwrap();
        let cfg = SolverConfig { max_iters: 5, ..Default::default() };
        let f = solve_steady(&g, &mask, &FluidParams::default(), &cfg).unwrap();
        assert!(!f.converged);
        assert_eq!(f.iterations, 5);
        assert_eq!(f.residual_history.len(), 5);
    }

    #[test]
    fn oversized_step_diverges() {
        let g = build_grid(4.0, 3.0, 16.0).unwrap();
        let mask = mask_object(&g, &circle(Point2::new(1.25, 1.5), 0.5)).unwrap();
        let cfg = SolverConfig { cfl: 5.0, ..Default::default() };
        let err = solve_steady(&g, &mask, &FluidParams::default(), &cfg).unwrap_err();
        assert!(matches!(err, FlowError::Diverged { .. }), "{err}");
    }
}
