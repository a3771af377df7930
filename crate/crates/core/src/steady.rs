//! Stationary solvers for the Euler–Lagrange system of the energy, plus
//! the frozen potentials V_j and the semiconvexity constant estimate used by
//! the Lyapunov machinery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{convolve, moments_of, DensityPair, Grid1D};
use crate::model::{CouplingDeriv, Kernel, ModelSpec};

/// Density threshold separating "on support" from "off support" cells.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

/// A solved steady state with its Euler-Lagrange data.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub pair: DensityPair,
    pub c1: f64,
    pub c2: f64,
    pub support1: f64,
    pub support2: f64,
    /// Sup-norm Euler-Lagrange defect, per species.
    pub residual: (f64, f64),
    /// Frozen potentials V_j(x) = d_{r_j} h(rhobar1(x), rhobar2(x)).
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    /// Bound on |V_j''| from discrete second differences.
    pub k0_estimate: f64,
}

/// Scalar summary for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteadySummary {
    pub c1: f64,
    pub c2: f64,
    pub c1_tilde: Option<f64>,
    pub c2_tilde: Option<f64>,
    pub support1: f64,
    pub support2: f64,
    pub residual1: f64,
    pub residual2: f64,
    pub k0_estimate: f64,
    pub lambda_eps: f64,
    pub m2_1: f64,
    pub m2_2: f64,
    pub peak1: f64,
    pub peak2: f64,
}

impl SteadyState {
    /// Reduced convexity modulus lambda_eps = lambda - eps * K0.
    pub fn lambda_eps(&self, m: &ModelSpec) -> f64 {
        m.kernel.lambda() - m.eps * self.k0_estimate
    }

    pub fn summary(&self, m: &ModelSpec, c_tilde: Option<(f64, f64)>) -> SteadySummary {
        let mom = self.pair.moments();
        SteadySummary {
            c1: self.c1,
            c2: self.c2,
            c1_tilde: c_tilde.map(|c| c.0),
            c2_tilde: c_tilde.map(|c| c.1),
            support1: self.support1,
            support2: self.support2,
            residual1: self.residual.0,
            residual2: self.residual.1,
            k0_estimate: self.k0_estimate,
            lambda_eps: self.lambda_eps(m),
            m2_1: mom.m2_1,
            m2_2: mom.m2_2,
            peak1: self.pair.rho1.iter().cloned().fold(0.0, f64::max),
            peak2: self.pair.rho2.iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// Support edge with sub-cell resolution: the density vanishes linearly at a
/// free boundary, so the zero crossing is extrapolated from the last two
/// supported cells on each side and the wider side wins.
fn support_radius(rho: &[f64], grid: &Grid1D) -> f64 {
    let dx = grid.dx();
    let edge = |i: usize, inward: usize| -> f64 {
        let x = grid.center(i).abs();
        let slope = (rho[inward] - rho[i]) / dx;
        if slope > 0.0 {
            x + (rho[i] / slope).min(dx)
        } else {
            x + 0.5 * dx
        }
    };
    let mut r: f64 = 0.0;
    if let Some(hi) = rho.iter().rposition(|&v| v > SUPPORT_THRESHOLD) {
        r = r.max(if hi > 0 { edge(hi, hi - 1) } else { grid.center(hi).abs() + 0.5 * dx });
    }
    if let Some(lo) = rho.iter().position(|&v| v > SUPPORT_THRESHOLD) {
        r = r.max(if lo + 1 < rho.len() { edge(lo, lo + 1) } else { grid.center(lo).abs() + 0.5 * dx });
    }
    r
}

/// Pointwise solve of Gamma_eps(u) = (p1, p2) followed by rho_j = (F_j')^{-1}(u_j).
fn densities_from_potentials(m: &ModelSpec, p1: f64, p2: f64) -> Result<(f64, f64)> {
    let u = m.gamma_inverse(p1, p2, 1e-13)?;
    Ok((m.f1.deriv_inv(u[0]), m.f2.deriv_inv(u[1])))
}

/// Rasterize the quadratic-kernel profile for trial constants, returning the
/// densities and their masses.
fn quadratic_profile(
    m: &ModelSpec,
    grid: &Grid1D,
    ct1: f64,
    ct2: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
    let lambda = m.kernel.lambda();
    let n = grid.n;
    let mut rho1 = vec![0.0; n];
    let mut rho2 = vec![0.0; n];
    // Even in x: compute one half and mirror.
    for i in 0..n.div_ceil(2) {
        let x = grid.center(i);
        let p1 = (ct1 - 0.5 * lambda * x * x).max(0.0);
        let p2 = (ct2 - 0.5 * lambda * x * x).max(0.0);
        let (r1, r2) = densities_from_potentials(m, p1, p2)?;
        rho1[i] = r1;
        rho2[i] = r2;
        rho1[n - 1 - i] = r1;
        rho2[n - 1 - i] = r2;
    }
    let dx = grid.dx();
    let mass1 = rho1.iter().sum::<f64>() * dx;
    let mass2 = rho2.iter().sum::<f64>() * dx;
    Ok((rho1, rho2, mass1, mass2))
}

/// Find (Ct1, Ct2) with both masses equal to 1 by Newton on the mass map,
/// falling back to alternating bisection when a Newton step misbehaves.
fn solve_quadratic_constants(m: &ModelSpec, grid: &Grid1D, tol: f64) -> Result<(f64, f64)> {
    // Bracket: masses are strictly increasing in the own constant.
    let mut lo = [1e-8, 1e-8];
    let mut hi = [1.0, 1.0];
    loop {
        let (_, _, m1, m2) = quadratic_profile(m, grid, hi[0], hi[1])?;
        if m1 >= 1.0 && m2 >= 1.0 {
            break;
        }
        hi[0] *= 2.0;
        hi[1] *= 2.0;
        if hi[0] > 1e8 {
            return Err(Error::Numeric("quadratic steady bracket expansion failed".into()));
        }
    }
    let mut c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    for _ in 0..200 {
        let (_, _, m1, m2) = quadratic_profile(m, grid, c[0], c[1])?;
        let res = [m1 - 1.0, m2 - 1.0];
        if res[0].abs().max(res[1].abs()) <= tol {
            return Ok((c[0], c[1]));
        }
        // Maintain per-component brackets (mass increasing in own constant).
        for j in 0..2 {
            if res[j] > 0.0 {
                hi[j] = hi[j].min(c[j]);
            } else {
                lo[j] = lo[j].max(c[j]);
            }
        }
        // Newton with finite-difference Jacobian.
        let h = 1e-7 * (1.0 + c[0].abs().max(c[1].abs()));
        let (_, _, m1a, m2a) = quadratic_profile(m, grid, c[0] + h, c[1])?;
        let (_, _, m1b, m2b) = quadratic_profile(m, grid, c[0], c[1] + h)?;
        let j11 = (m1a - m1) / h;
        let j12 = (m1b - m1) / h;
        let j21 = (m2a - m2) / h;
        let j22 = (m2b - m2) / h;
        let det = j11 * j22 - j12 * j21;
        let mut next = c;
        let mut ok = det.abs() > 1e-14;
        if ok {
            next[0] = c[0] - (j22 * res[0] - j12 * res[1]) / det;
            next[1] = c[1] - (-j21 * res[0] + j11 * res[1]) / det;
            ok = next
                .iter()
                .zip(lo.iter().zip(&hi))
                .all(|(v, (l, h))| v.is_finite() && *v > *l && *v < *h);
        }
        if ok {
            c = next;
        } else {
            // Bisection fallback on both components.
            c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        }
    }
    Err(Error::Numeric("quadratic steady constants did not converge".into()))
}

fn build_state(
    m: &ModelSpec,
    grid: &Grid1D,
    rho1: Vec<f64>,
    rho2: Vec<f64>,
    c1: f64,
    c2: f64,
) -> Result<SteadyState> {
    let pair = DensityPair::new_unchecked(*grid, rho1, rho2)?;
    let n = grid.n;
    let mut v1 = vec![0.0; n];
    let mut v2 = vec![0.0; n];
    for i in 0..n {
        v1[i] = m.coupling.eval(CouplingDeriv::D1, pair.rho1[i], pair.rho2[i])?;
        v2[i] = m.coupling.eval(CouplingDeriv::D2, pair.rho1[i], pair.rho2[i])?;
    }
    let dx2 = grid.dx() * grid.dx();
    let mut k0: f64 = 0.0;
    for v in [&v1, &v2] {
        for w in v.windows(3) {
            k0 = k0.max(((w[2] - 2.0 * w[1] + w[0]) / dx2).abs());
        }
    }
    let support1 = support_radius(&pair.rho1, grid);
    let support2 = support_radius(&pair.rho2, grid);
    let mut s = SteadyState {
        pair,
        c1,
        c2,
        support1,
        support2,
        residual: (0.0, 0.0),
        v1,
        v2,
        k0_estimate: k0,
    };
    s.residual = el_residual(&s, m)?;
    Ok(s)
}

/// Solve the steady state for the quadratic kernel, where the convolution is
/// an explicit quadratic and the problem reduces to two scalar constants.
pub fn solve_steady_quadratic(m: &ModelSpec, grid: &Grid1D, tol: f64) -> Result<SteadyState> {
    let lambda = match m.kernel {
        Kernel::Quadratic { lambda } => lambda,
        _ => {
            return Err(Error::Config(
                "solve_steady_quadratic requires the quadratic kernel".into(),
            ))
        }
    };
    let (ct1, ct2) = solve_quadratic_constants(m, grid, tol)?;
    let (rho1, rho2, _, _) = quadratic_profile(m, grid, ct1, ct2)?;
    let (_, _, m2_1) = moments_of(&rho1, grid);
    let (_, _, m2_2) = moments_of(&rho2, grid);
    let c1 = ct1 + 0.5 * lambda * m2_2;
    let c2 = ct2 + 0.5 * lambda * m2_1;
    build_state(m, grid, rho1, rho2, c1, c2)
}

/// Reduced constants of the quadratic solve, Ct_j = C_j - lambda m2[rhobar_j']/2.
pub fn quadratic_c_tilde(s: &SteadyState, m: &ModelSpec) -> (f64, f64) {
    let lambda = m.kernel.lambda();
    let mom = s.pair.moments();
    (s.c1 - 0.5 * lambda * mom.m2_2, s.c2 - 0.5 * lambda * mom.m2_1)
}

/// Given external potentials U_j = K * rho_j, rasterize the profile for trial
/// constants and return masses.
fn general_profile(
    m: &ModelSpec,
    grid: &Grid1D,
    u1: &[f64],
    u2: &[f64],
    c1: f64,
    c2: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
    let n = grid.n;
    let mut rho1 = vec![0.0; n];
    let mut rho2 = vec![0.0; n];
    for i in 0..n {
        let p1 = (c1 - u2[i]).max(0.0);
        let p2 = (c2 - u1[i]).max(0.0);
        let (r1, r2) = densities_from_potentials(m, p1, p2)?;
        rho1[i] = r1;
        rho2[i] = r2;
    }
    let dx = grid.dx();
    let mass1 = rho1.iter().sum::<f64>() * dx;
    let mass2 = rho2.iter().sum::<f64>() * dx;
    Ok((rho1, rho2, mass1, mass2))
}

/// Normalize the constants for unit masses at frozen potentials by
/// alternating monotone bisection sweeps.
fn general_constants(
    m: &ModelSpec,
    grid: &Grid1D,
    u1: &[f64],
    u2: &[f64],
    guess: (f64, f64),
    tol: f64,
) -> Result<(f64, f64)> {
    let mut c = [guess.0.max(1e-8), guess.1.max(1e-8)];
    for _ in 0..100 {
        let (_, _, m1, m2) = general_profile(m, grid, u1, u2, c[0], c[1])?;
        if (m1 - 1.0).abs().max((m2 - 1.0).abs()) <= tol {
            return Ok((c[0], c[1]));
        }
        for j in 0..2 {
            // Bisect the own constant at the other held fixed.
            let mut lo = 1e-10;
            let mut hi = c[j].max(1.0);
            let mass_at = |cj: f64, mm: &ModelSpec| -> Result<f64> {
                let cc = if j == 0 { [cj, c[1]] } else { [c[0], cj] };
                let (_, _, m1, m2) = general_profile(mm, grid, u1, u2, cc[0], cc[1])?;
                Ok(if j == 0 { m1 } else { m2 })
            };
            while mass_at(hi, m)? < 1.0 {
                hi *= 2.0;
                if hi > 1e8 {
                    return Err(Error::Numeric("steady constant bracket expansion failed".into()));
                }
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if mass_at(mid, m)? < 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-14 * (1.0 + hi) {
                    break;
                }
            }
            c[j] = 0.5 * (lo + hi);
        }
    }
    Ok((c[0], c[1]))
}

/// Damped fixed-point solver for any supported kernel: iterate on the
/// convolved potentials U_j = K * rho_j with constants renormalized for unit
/// mass at every outer step.
pub fn solve_steady_general(
    m: &ModelSpec,
    grid: &Grid1D,
    tol: f64,
    damping: f64,
) -> Result<SteadyState> {
    let init = crate::grid::uniform_density(grid, -1.0, 1.0)?;
    solve_steady_general_from(m, grid, tol, damping, &init, &init)
}

/// As solve_steady_general with explicit initial densities (multi-start).
pub fn solve_steady_general_from(
    m: &ModelSpec,
    grid: &Grid1D,
    tol: f64,
    damping: f64,
    init1: &[f64],
    init2: &[f64],
) -> Result<SteadyState> {
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::InvalidParameter(format!("damping must be in (0, 1], got {damping}")));
    }
    let max_outer = 500;
    let mut u1 = convolve(&m.kernel, init1, grid);
    let mut u2 = convolve(&m.kernel, init2, grid);
    let mut c = (0.7, 0.7);
    let dx = grid.dx();
    let mut last_change = f64::INFINITY;
    let mut rho = (init1.to_vec(), init2.to_vec());
    for _ in 0..max_outer {
        c = general_constants(m, grid, &u1, &u2, c, 0.1 * tol)?;
        let (rho1, rho2, _, _) = general_profile(m, grid, &u1, &u2, c.0, c.1)?;
        let n1 = convolve(&m.kernel, &rho1, grid);
        let n2 = convolve(&m.kernel, &rho2, grid);
        last_change = rho1
            .iter()
            .zip(&rho.0)
            .chain(rho2.iter().zip(&rho.1))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * dx;
        rho = (rho1, rho2);
        for i in 0..grid.n {
            u1[i] = (1.0 - damping) * u1[i] + damping * n1[i];
            u2[i] = (1.0 - damping) * u2[i] + damping * n2[i];
        }
        if last_change <= tol {
            // One final exact renormalization at the converged potentials.
            c = general_constants(m, grid, &u1, &u2, c, 0.1 * tol)?;
            let (rho1, rho2, _, _) = general_profile(m, grid, &u1, &u2, c.0, c.1)?;
            return build_state(m, grid, rho1, rho2, c.0, c.1);
        }
    }
    Err(Error::Numeric(format!(
        "steady fixed point did not converge in {max_outer} iterations, last L1 change {last_change:e}"
    )))
}

/// Sup-norm Euler-Lagrange defect per species: on the support the full
/// equation, off the support the one-sided inequality.
pub fn el_residual(s: &SteadyState, m: &ModelSpec) -> Result<(f64, f64)> {
    let grid = &s.pair.grid;
    let k1 = convolve(&m.kernel, &s.pair.rho1, grid);
    let k2 = convolve(&m.kernel, &s.pair.rho2, grid);
    let mut r = [0.0f64; 2];
    for i in 0..grid.n {
        let (rho1, rho2) = (s.pair.rho1[i], s.pair.rho2[i]);
        let lhs1 = m.f1.deriv(rho1)
            + m.eps * m.coupling.eval(CouplingDeriv::D1, rho1, rho2)?
            + k2[i];
        let lhs2 = m.f2.deriv(rho2)
            + m.eps * m.coupling.eval(CouplingDeriv::D2, rho1, rho2)?
            + k1[i];
        if rho1 > SUPPORT_THRESHOLD {
            r[0] = r[0].max((lhs1 - s.c1).abs());
        } else {
            r[0] = r[0].max((s.c1 - lhs1).max(0.0));
        }
        if rho2 > SUPPORT_THRESHOLD {
            r[1] = r[1].max((lhs2 - s.c2).abs());
        } else {
            r[1] = r[1].max((s.c2 - lhs2).max(0.0));
        }
    }
    Ok((r[0], r[1]))
}
