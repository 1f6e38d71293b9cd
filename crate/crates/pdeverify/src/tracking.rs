//! Exact tracking on the grid: the forward heat flow, then the controlled
//! Liouville equation driven by `u_i = Y_i φ / p` with `𝒜φ = ∂_t p^ref`.

use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::grid::{heat_step, laplacian, GridField};
use crate::operator::SubLaplacian;
use crate::solve::{solve_poisson_zero_mean, CgOptions};

/// Densities below this are treated as a loss of positivity.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

/// One explicit upwind finite-volume step of `∂_t p + div(p v) = 0`.
///
/// `velocity[j][c]` is the normal velocity through the `+` face of cell `c`
/// along axis `j`; entries for faces on a zero-flux boundary are ignored.
pub fn liouville_step(p: &GridField, velocity: &[Vec<f64>], dt: f64) -> Result<GridField> {
    let g = p.grid();
    check_len(g.dim(), velocity.len())?;
    let v = p.values();
    let mut out = v.to_vec();
    for (j, vel) in velocity.iter().enumerate() {
        check_len(g.len(), vel.len())?;
        let r = dt / g.spacing()[j];
        for c in 0..g.len() {
            let Some(u) = g.up(c, j) else { continue };
            let s = vel[c];
            let flux = s * if s >= 0.0 { v[c] } else { v[u] };
            out[c] -= r * flux;
            out[u] += r * flux;
        }
    }
    GridField::new(g.clone(), out)
}

/// Face velocities `v_f = E_f / p_upwind` that make the upwind flux equal to
/// the exact flux `E_f`; this is `Σ_i g_i u_i` with `u_i = Y_i φ / p` and
/// `p` taken from the upwind cell.
pub fn tracking_velocity(op: &SubLaplacian, phi: &GridField, p: &GridField) -> Vec<Vec<f64>> {
    let g = op.grid();
    let mut flux = op.face_fluxes(phi.values());
    let pv = p.values();
    for (j, fj) in flux.iter_mut().enumerate() {
        for c in 0..g.len() {
            if let Some(u) = g.up(c, j) {
                let up = if fj[c] >= 0.0 { pv[c] } else { pv[u] };
                fj[c] /= up;
            }
        }
    }
    flux
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingReport {
    pub cells: Vec<usize>,
    pub dt: f64,
    pub steps: usize,
    pub horizon: f64,
    /// `(t, |p^c_t - p^f_{T-t}|₂ / |p^f_{T-t}|₂)` after every step.
    pub relative_errors: Vec<(f64, f64)>,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Largest `|(φ - mean φ) - (p^f - mean p^f)|_∞` over the reverse steps;
    /// zero in exact arithmetic when `𝒜 = -Δ_h`.
    pub potential_deviation: f64,
    pub max_poisson_residual: f64,
    pub cg_iterations: usize,
    pub min_density: f64,
    pub mass_drift: f64,
}

/// Runs the heat flow from `target` for `steps` steps of `dt`, then drives
/// the controlled density from `p^f_T` back along the reversed path.
pub fn exact_tracking_run(
    target: &GridField,
    op: &SubLaplacian,
    dt: f64,
    steps: usize,
    cg: &CgOptions,
) -> Result<TrackingReport> {
    exact_tracking_run_observed(target, op, dt, steps, cg, |_, _, _| Ok(()))
}

/// As [`exact_tracking_run`], calling `observe(k, p^c, p^f_{T-t})` after
/// every reverse step `k` (1-based).
pub fn exact_tracking_run_observed(
    target: &GridField,
    op: &SubLaplacian,
    dt: f64,
    steps: usize,
    cg: &CgOptions,
    mut observe: impl FnMut(usize, &GridField, &GridField) -> Result<()>,
) -> Result<TrackingReport> {
    if op.grid() != target.grid() && **op.grid() != **target.grid() {
        return Err(Error::invalid("operator and target live on different grids"));
    }
    if steps == 0 {
        return Err(Error::invalid("need at least one step"));
    }
    if target.min() <= 0.0 {
        return Err(Error::invalid("target density must be strictly positive"));
    }
    let mut forward = Vec::with_capacity(steps + 1);
    forward.push(target.clone());
    for k in 0..steps {
        let next = heat_step(&forward[k], dt)?;
        forward.push(next);
    }

    let mut p = forward[steps].clone();
    let mass0 = p.mass();
    let mut phi: Option<GridField> = None;
    let mut rep = TrackingReport {
        cells: target.grid().cells().to_vec(),
        dt,
        steps,
        horizon: dt * steps as f64,
        relative_errors: Vec::with_capacity(steps),
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        potential_deviation: 0.0,
        max_poisson_residual: 0.0,
        cg_iterations: 0,
        min_density: p.min(),
        mass_drift: 0.0,
    };
    for k in 0..steps {
        let pf = &forward[steps - k];
        // ∂_t p^ref(t_k) = -Δ_h p^f(T - t_k)
        let mut f = laplacian(pf).into_values();
        f.iter_mut().for_each(|v| *v = -*v);
        let f = GridField::new(pf.grid().clone(), f)?;
        let (sol, cgr) = solve_poisson_zero_mean(op, &f, phi.as_ref(), cg)?;
        rep.cg_iterations += cgr.iterations;
        rep.max_poisson_residual = rep.max_poisson_residual.max(cgr.relative_residual);
        let pf_mean = pf.mean();
        let dev = sol.values().iter().zip(pf.values()).fold(0.0f64, |m, (a, b)| m.max((a - (b - pf_mean)).abs()));
        rep.potential_deviation = rep.potential_deviation.max(dev);

        if p.min() < POSITIVITY_FLOOR {
            return Err(Error::Positivity { step: k, min: p.min() });
        }
        let vel = tracking_velocity(op, &sol, &p);
        p = liouville_step(&p, &vel, dt)?;
        phi = Some(sol);

        let reference = &forward[steps - k - 1];
        let err = p.l2_distance(reference);
        let rel = err / reference.l2_norm();
        let abs = p.values().iter().zip(reference.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        rep.relative_errors.push(((k + 1) as f64 * dt, rel));
        rep.max_relative_error = rep.max_relative_error.max(rel);
        rep.max_abs_error = rep.max_abs_error.max(abs);
        rep.min_density = rep.min_density.min(p.min());
        rep.mass_drift = rep.mass_drift.max((p.mass() - mass0).abs());
        observe(k + 1, &p, reference)?;
    }
    Ok(rep)
}
