//! Explicit finite-volume integrator for the two-species evolution system:
//! first-order upwind fluxes, CFL-limited Euler steps, no-flux boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{convolve, l1_distance, to_quantiles, w2_of_quantiles, DensityPair};
use crate::lyapunov::{self, FlowTrace};
use crate::model::{CouplingDeriv, ModelSpec};
use crate::steady::{SteadyState, SUPPORT_THRESHOLD};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowConfig {
    pub t_final: f64,
    pub cfl_safety: f64,
    pub snapshot_every: usize,
    pub dt_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { t_final: 1.0, cfl_safety: 0.4, snapshot_every: 20, dt_max: 1e-3 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "final time must be positive, got {}",
                self.t_final
            )));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 0.9) {
            return Err(Error::InvalidParameter(format!(
                "cfl_safety must lie in (0, 0.9], got {}",
                self.cfl_safety
            )));
        }
        if !(self.dt_max > 0.0) || self.snapshot_every == 0 {
            return Err(Error::InvalidParameter("dt_max and snapshot_every must be positive".into()));
        }
        Ok(())
    }
}

/// Composite driving potentials Phi_j = F_j'(rho_j) + eps d_{r_j}h + K*rho_j'.
pub fn potentials(p: &DensityPair, m: &ModelSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = &p.grid;
    let conv1 = convolve(&m.kernel, &p.rho1, g);
    let conv2 = convolve(&m.kernel, &p.rho2, g);
    let mut phi1 = vec![0.0; g.n];
    let mut phi2 = vec![0.0; g.n];
    for i in 0..g.n {
        let (r1, r2) = (p.rho1[i], p.rho2[i]);
        phi1[i] = m.f1.deriv(r1) + conv2[i];
        phi2[i] = m.f2.deriv(r2) + conv1[i];
        if m.eps != 0.0 {
            phi1[i] += m.eps * m.coupling.eval(CouplingDeriv::D1, r1, r2)?;
            phi2[i] += m.eps * m.coupling.eval(CouplingDeriv::D2, r1, r2)?;
        }
    }
    Ok((phi1, phi2))
}

/// Face velocities v_j[i] at the face between cells i-1 and i
/// (arrays of length n+1, zero at the two boundary faces).
pub fn velocity_fields(p: &DensityPair, m: &ModelSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = &p.grid;
    let dx = g.dx();
    let (phi1, phi2) = potentials(p, m)?;
    let mut v1 = vec![0.0; g.n + 1];
    let mut v2 = vec![0.0; g.n + 1];
    for i in 1..g.n {
        v1[i] = -(phi1[i] - phi1[i - 1]) / dx;
        v2[i] = -(phi2[i] - phi2[i - 1]) / dx;
    }
    Ok((v1, v2))
}

/// Largest face speed among faces that can actually carry flux (an adjacent
/// cell holds mass); the empty far field does not constrain the step.
fn max_active_speed(p: &DensityPair, v1: &[f64], v2: &[f64]) -> f64 {
    let n = p.grid.n;
    let mut vmax: f64 = 0.0;
    for i in 1..n {
        if p.rho1[i - 1] > SUPPORT_THRESHOLD || p.rho1[i] > SUPPORT_THRESHOLD {
            vmax = vmax.max(v1[i].abs());
        }
        if p.rho2[i - 1] > SUPPORT_THRESHOLD || p.rho2[i] > SUPPORT_THRESHOLD {
            vmax = vmax.max(v2[i].abs());
        }
    }
    vmax
}

/// Largest mobility-weighted diffusivity rho_j F_j''(rho_j). The advective
/// CFL alone does not see the parabolic stiffness of the rho grad F'(rho)
/// term, and violating dt <= dx^2 / (2 D) leaves a sawtooth that slowly
/// pumps energy near equilibrium.
fn max_diffusivity(p: &DensityPair, m: &ModelSpec) -> f64 {
    let kappa_sum: f64 = m.kappa.iter().flatten().sum();
    let mut dmax: f64 = 0.0;
    for i in 0..p.grid.n {
        dmax = dmax.max(p.rho1[i] * m.f1.deriv2(p.rho1[i]));
        dmax = dmax.max(p.rho2[i] * m.f2.deriv2(p.rho2[i]));
    }
    // The eps coupling perturbs the diffusion matrix by at most the kappa
    // bounds relative to F''.
    dmax * (1.0 + m.eps * kappa_sum)
}

/// Stability-limited time step: the advective CFL cfl_safety dx / max |v|
/// combined with the parabolic bound cfl_safety dx^2 / (2 max D), capped
/// at dt_max.
pub fn cfl_dt(p: &DensityPair, m: &ModelSpec, cfg: &FlowConfig) -> Result<f64> {
    let (v1, v2) = velocity_fields(p, m)?;
    let vmax = max_active_speed(p, &v1, &v2);
    let dx = p.grid.dx();
    let mut dt = cfg.dt_max;
    if vmax > 0.0 {
        dt = dt.min(cfg.cfl_safety * dx / vmax);
    }
    let dmax = max_diffusivity(p, m);
    if dmax > 0.0 {
        dt = dt.min(cfg.cfl_safety * dx * dx / (2.0 * dmax));
    }
    Ok(dt)
}

fn upwind_update(rho: &[f64], v: &[f64], dx: f64, dt: f64) -> Result<Vec<f64>> {
    let n = rho.len();
    // flux[i] across the face between cells i-1 and i.
    let mut flux = vec![0.0; n + 1];
    for i in 1..n {
        let up = if v[i] >= 0.0 { rho[i - 1] } else { rho[i] };
        flux[i] = up * v[i];
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = rho[i] - dt * (flux[i + 1] - flux[i]) / dx;
        if out[i] < 0.0 {
            if out[i] < -1e-13 {
                return Err(Error::Numeric(format!(
                    "negative density {:e} after step; CFL condition violated",
                    out[i]
                )));
            }
            out[i] = 0.0;
        }
    }
    Ok(out)
}

/// One explicit upwind Euler step. The caller must respect the CFL bound.
pub fn fv_step(p: &DensityPair, m: &ModelSpec, dt: f64) -> Result<DensityPair> {
    let (v1, v2) = velocity_fields(p, m)?;
    let dx = p.grid.dx();
    let rho1 = upwind_update(&p.rho1, &v1, dx, dt)?;
    let rho2 = upwind_update(&p.rho2, &v2, dx, dt)?;
    DensityPair::new_unchecked(p.grid, rho1, rho2)
}

fn record(
    trace: &mut FlowTrace,
    t: f64,
    p: &DensityPair,
    m: &ModelSpec,
    steady: &SteadyState,
    x_bar1: &[f64],
    x_bar2: &[f64],
    quantiles: usize,
) -> Result<()> {
    let g = &p.grid;
    let mom = p.moments();
    trace.times.push(t);
    trace.e_eps.push(lyapunov::energy(p, m)?);
    trace.l_eps.push(lyapunov::l_eps(p, m, steady)?);
    trace.n_eps.push(lyapunov::n_eps(p, m, steady)?);
    trace.h_c.push(lyapunov::entropy(p));
    trace.mass1.push(mom.mass1);
    trace.mass2.push(mom.mass2);
    trace.m1_comb.push(mom.m1_1 + mom.m1_2);
    let x1 = to_quantiles(&p.rho1, g, quantiles)?;
    let x2 = to_quantiles(&p.rho2, g, quantiles)?;
    let d1 = w2_of_quantiles(&x1, x_bar1)?;
    let d2 = w2_of_quantiles(&x2, x_bar2)?;
    trace.w2.push((d1 * d1 + d2 * d2).sqrt());
    trace.l1_err1.push(l1_distance(&p.rho1, &steady.pair.rho1, g));
    trace.l1_err2.push(l1_distance(&p.rho2, &steady.pair.rho2, g));
    Ok(())
}

/// Integrate to cfg.t_final recording a trace; returns the trace and the
/// final state. The trace's reference energies are the steady-state values,
/// so decay fits should use a window well inside [0, t_final].
pub fn run_flow(
    init: &DensityPair,
    m: &ModelSpec,
    steady: &SteadyState,
    cfg: &FlowConfig,
) -> Result<(FlowTrace, DensityPair)> {
    cfg.validate()?;
    if init.grid != steady.pair.grid {
        return Err(Error::GridMismatch("initial pair and steady state grids differ".into()));
    }
    let quantiles = 256;
    let x_bar1 = to_quantiles(&steady.pair.rho1, &init.grid, quantiles)?;
    let x_bar2 = to_quantiles(&steady.pair.rho2, &init.grid, quantiles)?;
    let mut trace = FlowTrace::default();
    let mut p = init.clone();
    let mut t = 0.0;
    record(&mut trace, t, &p, m, steady, &x_bar1, &x_bar2, quantiles)?;
    let mut step = 0usize;
    while t < cfg.t_final {
        let dt = cfl_dt(&p, m, cfg)?.min(cfg.t_final - t);
        p = fv_step(&p, m, dt)?;
        if p.rho1.iter().chain(&p.rho2).any(|r| !r.is_finite()) {
            return Err(Error::Numeric(format!("non-finite density at t = {t}")));
        }
        t += dt;
        step += 1;
        if step % cfg.snapshot_every == 0 || t >= cfg.t_final {
            record(&mut trace, t, &p, m, steady, &x_bar1, &x_bar2, quantiles)?;
        }
    }
    trace.e_ref = lyapunov::energy(&steady.pair, m)?;
    trace.l_ref = lyapunov::l_eps(&steady.pair, m, steady)?;
    Ok((trace, p))
}
