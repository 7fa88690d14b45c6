use super::{CellMask, FlowError, FlowField, FluidParams};

/// Force exerted by the fluid on the solid cells, `(F_x, F_y)`.
///
/// Sums over every solid/fluid cell interface: pressure at the adjacent
/// fluid cell center acting along the inward normal, plus tangential shear
/// from the one-sided difference between the fluid cell center velocity and
/// the no-slip wall half a cell away.
pub fn drag_force(flow: &FlowField, mask: &CellMask, params: &FluidParams) -> Result<(f64, f64), FlowError> {
    if !flow.converged {
        return Err(FlowError::NotConverged);
    }
    mask.matches(&flow.grid)?;
    let (nx, ny) = (flow.grid.nx, flow.grid.ny);
    let h = flow.grid.dx;
    let shear = 2.0 * params.eta();
    let uc = |i: usize, j: usize| 0.5 * (flow.u_at(i, j) + flow.u_at(i + 1, j));
    let vc = |i: usize, j: usize| 0.5 * (flow.v_at(i, j) + flow.v_at(i, j + 1));
    let (mut fx, mut fy) = (0.0, 0.0);
    for j in 0..ny {
        for i in 0..nx {
            if !mask.is_solid(i, j) {
                continue;
            }
            if i + 1 < nx && !mask.is_solid(i + 1, j) {
                fx -= flow.p_at(i + 1, j) * h;
                fy += shear * vc(i + 1, j);
            }
            if i > 0 && !mask.is_solid(i - 1, j) {
                fx += flow.p_at(i - 1, j) * h;
                fy += shear * vc(i - 1, j);
            }
            if j + 1 < ny && !mask.is_solid(i, j + 1) {
                fy -= flow.p_at(i, j + 1) * h;
                fx += shear * uc(i, j + 1);
            }
            if j > 0 && !mask.is_solid(i, j - 1) {
                fy += flow.p_at(i, j - 1) * h;
                fx += shear * uc(i, j - 1);
            }
        }
    }
    Ok((fx, fy))
}

/// `c_d = 2 F_d / (ρ v_in² A)`.
pub fn drag_coefficient(f_drag: f64, params: &FluidParams, frontal: f64) -> Result<f64, FlowError> {
    if !(frontal > 0.0) {
        return Err(FlowError::NonPositiveArea(frontal));
    }
    params.validate()?;
    Ok(2.0 * f_drag / (params.rho * params.v_in * params.v_in * frontal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowsim::{build_grid, solve_steady, CellMask, SolverConfig};

    #[test]
    fn coefficient_substitution() {
        let p = |v_in: f64| FluidParams { rho: 1.0, nu: 0.02, v_in };
        assert_eq!(drag_coefficient(0.0, &p(1.0), 1.0).unwrap(), 0.0);
        assert_eq!(drag_coefficient(1.0, &p(1.0), 2.0).unwrap(), 1.0);
        assert_eq!(drag_coefficient(2.0, &p(2.0), 1.0).unwrap(), 1.0);
        assert!(drag_coefficient(1.0, &p(1.0), 0.0).is_err());
        let a = drag_coefficient(0.7, &p(1.3), 0.9).unwrap();
        let b = drag_coefficient(0.7, &p(1.3), 1.8).unwrap();
        assert_eq!(a, 2.0 * b);
    }

    #[test]
    fn no_object_no_force() {
        let g = build_grid(2.0, 1.0, 32.0).unwrap();
        let mask = CellMask::empty(&g);
        let params = FluidParams::default();
        let f = solve_steady(&g, &mask, &params, &SolverConfig::default()).unwrap();
        assert_eq!(drag_force(&f, &mask, &params).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn unconverged_flow_is_refused() {
        let g = build_grid(2.0, 1.0, 32.0).unwrap();
        let mask = CellMask::empty(&g);
        let mut f = solve_steady(&g, &mask, &FluidParams::default(), &SolverConfig::default()).unwrap();
        f.converged = false;
        assert_eq!(drag_force(&f, &mask, &FluidParams::default()), Err(FlowError::NotConverged));
    }
}
