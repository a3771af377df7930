//! Minimizing-movement (JKO) scheme in quantile coordinates.
//!
//! In 1D the Wasserstein term of the penalized functional is an exact
//! quadratic in the quantile positions, so each step is a projected
//! gradient descent over monotone position vectors — no inner transport
//! solver. The eps cross term needs co-located densities and is rasterized
//! to the Eulerian grid per evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    deposit_packet, from_quantiles, l1_distance, packet_interval, to_quantiles, w2_of_quantiles,
    DensityPair, Grid1D, QuantilePair,
};
use crate::lyapunov::{self, FlowTrace};
use crate::model::{CouplingDeriv, Kernel, ModelSpec, PowerNonlinearity};
use crate::steady::SteadyState;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptConfig {
    pub max_iters: usize,
    /// Initial descent step in units of tau (1.0 relaxes the pure distance
    /// term in one step); later iterations use a Barzilai-Borwein step.
    pub step_size: f64,
    pub backtrack: f64,
    /// Termination threshold on the mass-weighted (velocity) gradient norm.
    pub tol: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { max_iters: 500, step_size: 1.0, backtrack: 0.5, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JkoConfig {
    pub tau: f64,
    pub m: usize,
    pub opt: OptConfig,
}

impl Default for JkoConfig {
    fn default() -> Self {
        Self { tau: 1e-3, m: 256, opt: OptConfig::default() }
    }
}

impl JkoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if self.m < 32 {
            return Err(Error::InvalidParameter(format!("quantile count too small: {}", self.m)));
        }
        let o = &self.opt;
        if !(o.step_size > 0.0) || !(o.backtrack > 0.0 && o.backtrack < 1.0) || !(o.tol > 0.0) {
            return Err(Error::InvalidParameter("bad optimizer parameters".into()));
        }
        Ok(())
    }
}

fn check_monotone(x: &[f64]) -> Result<()> {
    if x.len() < 4 {
        return Err(Error::InvalidParameter(format!("quantile count too small: {}", x.len())));
    }
    if x.windows(2).any(|w| w[1] < w[0]) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("quantiles must be finite and nondecreasing".into()));
    }
    Ok(())
}

/// Internal energy of one species in Lagrangian form: each of the m-1 gaps
/// carries mass dm at density dm / gap, so the cell contributes
/// gap * F(dm / gap). Collapsed gaps act as a barrier (+inf).
fn internal_energy(x: &[f64], f: &PowerNonlinearity) -> f64 {
    let dm = 1.0 / x.len() as f64;
    let mut acc = 0.0;
    for w in x.windows(2) {
        let gap = w[1] - w[0];
        if gap <= 0.0 {
            return f64::INFINITY;
        }
        acc += gap * f.value(dm / gap);
    }
    acc
}

/// Interaction energy on the quantile atoms: dm^2 sum_{i,k} K(x1_i - x2_k).
/// Quadratic kernels reduce to moments.
fn interaction_energy(x1: &[f64], x2: &[f64], kernel: &Kernel) -> f64 {
    let m = x1.len() as f64;
    let dm = 1.0 / m;
    if let Kernel::Quadratic { lambda } = kernel {
        let s1: f64 = x1.iter().sum();
        let s2: f64 = x2.iter().sum();
        let q1: f64 = x1.iter().map(|v| v * v).sum();
        let q2: f64 = x2.iter().map(|v| v * v).sum();
        return 0.5 * lambda * (dm * (q1 + q2) - 2.0 * (dm * s1) * (dm * s2));
    }
    let mut acc = 0.0;
    for &a in x1 {
        for &b in x2 {
            acc += kernel.eval(a - b);
        }
    }
    acc * dm * dm
}

fn h_energy_full(x: &QuantilePair, m: &ModelSpec, grid: &Grid1D) -> Result<f64> {
    let rho1 = from_quantiles(&x.x1, grid)?;
    let rho2 = from_quantiles(&x.x2, grid)?;
    let mut acc = 0.0;
    for i in 0..grid.n {
        acc += m.coupling.eval(CouplingDeriv::H, rho1[i], rho2[i])?;
    }
    Ok(acc * grid.dx())
}

/// E_eps evaluated on quantile coordinates: Lagrangian internal terms,
/// atom interaction, rasterized eps h-term.
pub fn quantile_energy(x: &QuantilePair, m: &ModelSpec, grid: &Grid1D) -> Result<f64> {
    check_monotone(&x.x1)?;
    check_monotone(&x.x2)?;
    let mut e = internal_energy(&x.x1, &m.f1) + internal_energy(&x.x2, &m.f2);
    if !e.is_finite() {
        return Ok(f64::INFINITY);
    }
    e += interaction_energy(&x.x1, &x.x2, &m.kernel);
    if m.eps != 0.0 {
        e += m.eps * h_energy_full(x, m, grid)?;
    }
    Ok(e)
}

fn distance_sq(x: &QuantilePair, xhat: &QuantilePair) -> f64 {
    let dm = 1.0 / x.m as f64;
    let mut acc = 0.0;
    for (a, b) in x.x1.iter().zip(&xhat.x1) {
        acc += (a - b) * (a - b);
    }
    for (a, b) in x.x2.iter().zip(&xhat.x2) {
        acc += (a - b) * (a - b);
    }
    acc * dm
}

/// The penalized step functional d(x, xhat)^2 / (2 tau) + E_eps(x).
pub fn jko_objective(
    x: &QuantilePair,
    xhat: &QuantilePair,
    m: &ModelSpec,
    tau: f64,
    grid: &Grid1D,
) -> Result<f64> {
    if x.m != xhat.m {
        return Err(Error::GridMismatch(format!("quantile counts differ: {} vs {}", x.m, xhat.m)));
    }
    let e = quantile_energy(x, m, grid)?;
    Ok(e + distance_sq(x, xhat) / (2.0 * tau))
}

/// Euclidean isotonic projection (pool-adjacent-violators, uniform weights).
pub fn pav(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    // Stack of blocks (mean, count).
    let mut means: Vec<f64> = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::with_capacity(n);
    for &v in y {
        means.push(v);
        counts.push(1);
        while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
            let (m2, c2) = (means.pop().unwrap(), counts.pop().unwrap());
            let l = means.len() - 1;
            let c1 = counts[l];
            means[l] = (means[l] * c1 as f64 + m2 * c2 as f64) / (c1 + c2) as f64;
            counts[l] = c1 + c2;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (mv, c) in means.into_iter().zip(counts) {
        out.extend(std::iter::repeat(mv).take(c));
    }
    out
}

/// Central finite-difference step for coordinate k, shrunk near collapsed
/// gaps so the stencil never leaves the monotone cone.
fn fd_step(x: &[f64], k: usize, base: f64) -> f64 {
    let mut e = base;
    if k > 0 {
        e = e.min(0.25 * (x[k] - x[k - 1]));
    }
    if k + 1 < x.len() {
        e = e.min(0.25 * (x[k + 1] - x[k]));
    }
    e.max(1e-14)
}

/// Gradient of the internal term: only the two adjacent gap cells move.
fn internal_gradient(x: &[f64], f: &PowerNonlinearity, base_step: f64, g: &mut [f64]) {
    let m = x.len();
    let dm = 1.0 / m as f64;
    let term = |gap: f64| gap * f.value(dm / gap);
    for k in 0..m {
        let e = fd_step(x, k, base_step);
        let mut plus = 0.0;
        let mut minus = 0.0;
        if k > 0 {
            let gap = x[k] - x[k - 1];
            plus += term(gap + e);
            minus += term(gap - e);
        }
        if k + 1 < m {
            let gap = x[k + 1] - x[k];
            plus += term(gap - e);
            minus += term(gap + e);
        }
        g[k] += (plus - minus) / (2.0 * e);
    }
}

/// Analytic interaction gradient dm^2 sum_k K'(x1_i - x2_k) (and the
/// mirrored sign for the second species).
fn interaction_gradient(x1: &[f64], x2: &[f64], kernel: &Kernel, g1: &mut [f64], g2: &mut [f64]) {
    let m = x1.len() as f64;
    let dm = 1.0 / m;
    if let Kernel::Quadratic { lambda } = kernel {
        let c1: f64 = x1.iter().sum::<f64>() * dm;
        let c2: f64 = x2.iter().sum::<f64>() * dm;
        for (g, &a) in g1.iter_mut().zip(x1) {
            *g += lambda * dm * (a - c2);
        }
        for (g, &b) in g2.iter_mut().zip(x2) {
            *g += lambda * dm * (b - c1);
        }
        return;
    }
    for (i, &a) in x1.iter().enumerate() {
        for (k, &b) in x2.iter().enumerate() {
            let d = kernel.deriv(a - b);
            g1[i] += dm * dm * d;
            g2[k] -= dm * dm * d;
        }
    }
}

/// h-term contribution over the cells touched by packets of the stencil
/// around coordinate k: deposits of packets k-1, k, k+1 are swapped in
/// place, the local quadrature evaluated, and the swap undone.
struct HGradScratch {
    rho1: Vec<f64>,
    rho2: Vec<f64>,
}

impl HGradScratch {
    fn new(x: &QuantilePair, grid: &Grid1D) -> Result<Self> {
        Ok(Self { rho1: from_quantiles(&x.x1, grid)?, rho2: from_quantiles(&x.x2, grid)? })
    }
}

#[allow(clippy::too_many_arguments)]
fn h_gradient_species(
    own: &[f64],
    scratch: &mut HGradScratch,
    own_is_first: bool,
    m: &ModelSpec,
    grid: &Grid1D,
    base_step: f64,
    g: &mut [f64],
) -> Result<()> {
    let mq = own.len();
    let dm = 1.0 / mq as f64;
    let dx = grid.dx();
    let mut pert = vec![0.0; 5];
    for k in 0..mq {
        let e = fd_step(own, k, base_step);
        let lo = k.saturating_sub(1);
        let hi = (k + 2).min(mq);
        // Cell range touched by the stencil packets under either sign.
        let mut a_min = f64::INFINITY;
        let mut b_max = f64::NEG_INFINITY;
        for p in lo..hi {
            let (a, b) = packet_interval(own, p);
            a_min = a_min.min(a - e);
            b_max = b_max.max(b + e);
        }
        let c0 = (((a_min.max(-grid.half_width) + grid.half_width) / dx).floor() as isize)
            .clamp(0, grid.n as isize - 1) as usize;
        let c1 = (((b_max.min(grid.half_width) + grid.half_width) / dx).ceil() as isize)
            .clamp(1, grid.n as isize) as usize;
        // Perturbed positions on a small window around k (the packet
        // intervals of lo..hi only involve positions lo-1..hi).
        let wlo = lo.saturating_sub(1);
        let whi = (hi + 1).min(mq);
        let mut diff = 0.0;
        for sign in [1.0, -1.0] {
            pert.clear();
            pert.extend_from_slice(&own[wlo..whi]);
            pert[k - wlo] += sign * e;
            let (rho, other) = if own_is_first {
                (&mut scratch.rho1, &scratch.rho2)
            } else {
                (&mut scratch.rho2, &scratch.rho1)
            };
            for p in lo..hi {
                let (a, b) = packet_interval(own, p);
                deposit_packet(rho, grid, a, b, own[p], -dm);
                let (pa, pb) = windowed_interval(&pert, p - wlo, wlo, mq);
                deposit_packet(rho, grid, pa, pb, pert[p - wlo], dm);
            }
            let mut acc = 0.0;
            for i in c0..c1 {
                let (r1, r2) = if own_is_first {
                    (rho[i].max(0.0), other[i])
                } else {
                    (other[i], rho[i].max(0.0))
                };
                acc += m.coupling.eval(CouplingDeriv::H, r1, r2)?;
            }
            diff += sign * acc;
            // Undo the swap.
            for p in lo..hi {
                let (pa, pb) = windowed_interval(&pert, p - wlo, wlo, mq);
                deposit_packet(rho, grid, pa, pb, pert[p - wlo], -dm);
                let (a, b) = packet_interval(own, p);
                deposit_packet(rho, grid, a, b, own[p], dm);
            }
        }
        g[k] += m.eps * dx * diff / (2.0 * e);
    }
    Ok(())
}

/// packet_interval of index p inside a window slice that starts at global
/// index wlo of a length-mq vector; boundary extrapolation only applies at
/// the true ends.
fn windowed_interval(win: &[f64], p: usize, wlo: usize, mq: usize) -> (f64, f64) {
    let a = if wlo + p == 0 {
        win[0] - 0.5 * (win[1] - win[0]).max(f64::EPSILON)
    } else {
        0.5 * (win[p - 1] + win[p])
    };
    let b = if wlo + p == mq - 1 {
        let l = win.len();
        win[l - 1] + 0.5 * (win[l - 1] - win[l - 2]).max(f64::EPSILON)
    } else {
        0.5 * (win[p] + win[p + 1])
    };
    (a, b)
}

/// Full objective gradient in raw coordinates dObj/dX.
fn objective_gradient(
    x: &QuantilePair,
    xhat: &QuantilePair,
    m: &ModelSpec,
    tau: f64,
    grid: &Grid1D,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mq = x.m;
    let dm = 1.0 / mq as f64;
    let fd = 1e-6 * grid.dx();
    let mut g1 = vec![0.0; mq];
    let mut g2 = vec![0.0; mq];
    for k in 0..mq {
        g1[k] = dm * (x.x1[k] - xhat.x1[k]) / tau;
        g2[k] = dm * (x.x2[k] - xhat.x2[k]) / tau;
    }
    internal_gradient(&x.x1, &m.f1, fd, &mut g1);
    internal_gradient(&x.x2, &m.f2, fd, &mut g2);
    interaction_gradient(&x.x1, &x.x2, &m.kernel, &mut g1, &mut g2);
    if m.eps != 0.0 {
        let mut scratch = HGradScratch::new(x, grid)?;
        h_gradient_species(&x.x1, &mut scratch, true, m, grid, fd, &mut g1)?;
        h_gradient_species(&x.x2, &mut scratch, false, m, grid, fd, &mut g2)?;
    }
    Ok((g1, g2))
}

fn metric_norm(g1: &[f64], g2: &[f64], dm: f64) -> f64 {
    let s: f64 = g1.iter().chain(g2).map(|v| v * v).sum();
    (s / dm).sqrt()
}

/// One minimizing-movement step: projected (PAV) gradient descent on the
/// penalized functional, started at xhat. The iterate never accepts an
/// objective increase, so the step inequality
/// d^2/(2 tau) <= E_eps(xhat) - E_eps(x+) holds by construction.
pub fn jko_step(
    xhat: &QuantilePair,
    m: &ModelSpec,
    cfg: &JkoConfig,
    grid: &Grid1D,
) -> Result<QuantilePair> {
    cfg.validate()?;
    check_monotone(&xhat.x1)?;
    check_monotone(&xhat.x2)?;
    let dm = 1.0 / xhat.m as f64;
    let mut x = xhat.clone();
    let mut obj = jko_objective(&x, xhat, m, cfg.tau, grid)?;
    if !obj.is_finite() {
        return Err(Error::Domain("previous iterate has collapsed cells".into()));
    }
    let mut step = cfg.opt.step_size * cfg.tau / dm;
    let mut prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..cfg.opt.max_iters {
        let (g1, g2) = objective_gradient(&x, xhat, m, cfg.tau, grid)?;
        let gnorm = metric_norm(&g1, &g2, dm);
        if gnorm <= cfg.opt.tol {
            return Ok(x);
        }
        // Barzilai-Borwein step from the previous pair, else keep the last
        // accepted step as the trial.
        if let Some((px1, px2, pg1, pg2)) = &prev {
            let mut ss = 0.0;
            let mut sy = 0.0;
            for ((xa, pa), (ga, pga)) in
                x.x1.iter().zip(px1).zip(g1.iter().zip(pg1)).chain(x.x2.iter().zip(px2).zip(g2.iter().zip(pg2)))
            {
                let s = xa - pa;
                let y = ga - pga;
                ss += s * s;
                sy += s * y;
            }
            if sy > 0.0 && ss > 0.0 {
                step = ss / sy;
            }
        }
        let mut accepted = false;
        let mut trial = step;
        let mut min_excess = f64::INFINITY;
        for _ in 0..60 {
            let c1 = pav(&x.x1.iter().zip(&g1).map(|(v, g)| v - trial * g).collect::<Vec<_>>());
            let c2 = pav(&x.x2.iter().zip(&g2).map(|(v, g)| v - trial * g).collect::<Vec<_>>());
            let cand = QuantilePair { m: x.m, x1: c1, x2: c2 };
            let val = jko_objective(&cand, xhat, m, cfg.tau, grid)?;
            if val < obj {
                prev = Some((
                    std::mem::take(&mut x.x1),
                    std::mem::take(&mut x.x2),
                    g1.clone(),
                    g2.clone(),
                ));
                x = cand;
                obj = val;
                step = trial;
                accepted = true;
                break;
            }
            min_excess = min_excess.min(val - obj);
            trial *= cfg.opt.backtrack;
        }
        if !accepted {
            // The objective is flat along the search direction at f64
            // resolution: no representable decrease exists, which is
            // convergence, not failure.
            let noise = 8.0 * f64::EPSILON * obj.abs().max(1.0);
            if gnorm <= 10.0 * cfg.opt.tol || (min_excess <= noise && gnorm <= 1e-3) {
                return Ok(x);
            }
            return Err(Error::Numeric(format!(
                "optimizer stalled at gradient norm {gnorm:e} (tol {:e})",
                cfg.opt.tol
            )));
        }
    }
    Ok(x)
}

/// Compactly-supported-in-practice smooth test function: a Gaussian window
/// times 1, x or x^2. width = +inf gives the constant function.
#[derive(Debug, Clone, Copy)]
pub struct Zeta {
    pub center: f64,
    pub width: f64,
    pub poly: u8,
    c2_norm: f64,
}

impl Zeta {
    pub fn new(center: f64, width: f64, poly: u8, grid: &Grid1D) -> Result<Self> {
        if poly > 2 || !(width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "zeta wants poly in 0..=2 and positive width, got ({poly}, {width})"
            )));
        }
        let mut z = Self { center, width, poly, c2_norm: 0.0 };
        let samples = 8192;
        let mut norm: f64 = 0.0;
        for i in 0..=samples {
            let x = -grid.half_width + 2.0 * grid.half_width * i as f64 / samples as f64;
            let (v, d1, d2) = z.eval(x);
            norm = norm.max(v.abs()).max(d1.abs()).max(d2.abs());
        }
        z.c2_norm = norm;
        Ok(z)
    }

    /// Value and first two derivatives.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let (g, g1, g2) = if self.width.is_finite() {
            let u = (x - self.center) / self.width;
            let g = (-0.5 * u * u).exp();
            (g, -u / self.width * g, (u * u - 1.0) / (self.width * self.width) * g)
        } else {
            (1.0, 0.0, 0.0)
        };
        let (p, p1, p2) = match self.poly {
            0 => (1.0, 0.0, 0.0),
            1 => (x, 1.0, 0.0),
            _ => (x * x, 2.0 * x, 2.0),
        };
        (p * g, p1 * g + p * g1, p2 * g + 2.0 * p1 * g1 + p * g2)
    }

    pub fn c2_norm(&self) -> f64 {
        self.c2_norm
    }
}

/// Default probe set: Gaussian windows at two centers times {1, x, x^2}.
pub fn default_zeta_set(grid: &Grid1D) -> Result<Vec<Zeta>> {
    let mut out = Vec::new();
    for center in [-0.5, 0.5] {
        for poly in 0..=2u8 {
            out.push(Zeta::new(center, 0.8, poly, grid)?);
        }
    }
    Ok(out)
}

const RESIDUAL_QUANTILES: usize = 256;

/// Cell-centered gradient of the composite potentials, linearly
/// interpolated at position x.
fn interp_gradient(phi: &[f64], grid: &Grid1D, x: f64) -> f64 {
    let dx = grid.dx();
    let n = grid.n;
    let mut grad = vec![0.0; n];
    for i in 1..n - 1 {
        grad[i] = (phi[i + 1] - phi[i - 1]) / (2.0 * dx);
    }
    grad[0] = (phi[1] - phi[0]) / dx;
    grad[n - 1] = (phi[n - 1] - phi[n - 2]) / dx;
    let pos = (x + grid.half_width) / dx - 0.5;
    let i = (pos.floor() as isize).clamp(0, n as isize - 2) as usize;
    let t = (pos - i as f64).clamp(0.0, 1.0);
    grad[i] * (1.0 - t) + grad[i + 1] * t
}

/// Time-discrete weak residuals of one JKO transition against the test set,
/// and the a-priori bound (E_eps(prev) - E_eps(next)) * ||zeta||_C2. The
/// reported triple (R1, R2, bound) belongs to the zeta with the worst
/// (R1+R2)/bound ratio.
pub fn weak_residual(
    prev: &DensityPair,
    next: &DensityPair,
    m: &ModelSpec,
    tau: f64,
    zeta_set: &[Zeta],
) -> Result<(f64, f64, f64)> {
    if prev.grid != next.grid {
        return Err(Error::GridMismatch("iterates live on different grids".into()));
    }
    let g = &prev.grid;
    let mq = RESIDUAL_QUANTILES;
    let dm = 1.0 / mq as f64;
    let xh1 = to_quantiles(&prev.rho1, g, mq)?;
    let xh2 = to_quantiles(&prev.rho2, g, mq)?;
    let xp1 = to_quantiles(&next.rho1, g, mq)?;
    let xp2 = to_quantiles(&next.rho2, g, mq)?;
    let (phi1, phi2) = crate::flow::potentials(next, m)?;
    let de = lyapunov::energy(prev, m)? - lyapunov::energy(next, m)?;
    let mut worst = (0.0, 0.0, f64::INFINITY);
    let mut worst_ratio = f64::NEG_INFINITY;
    for z in zeta_set {
        let mut r = [0.0f64; 2];
        for (j, (xh, xp, phi)) in
            [(&xh1, &xp1, &phi1), (&xh2, &xp2, &phi2)].into_iter().enumerate()
        {
            let mut acc = 0.0;
            for k in 0..mq {
                let (zh, _, _) = z.eval(xh[k]);
                let (zp, zp1, _) = z.eval(xp[k]);
                // Lagrangian difference quotient plus flux term at the atom.
                acc += dm * ((zp - zh) / tau + interp_gradient(phi, g, xp[k]) * zp1);
            }
            r[j] = acc.abs();
        }
        let bound = de * z.c2_norm();
        let ratio = (r[0] + r[1]) / bound.max(1e-300);
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst = (r[0], r[1], bound);
        }
    }
    Ok(worst)
}

/// The two H^1-type diagnostics for one transition: the heat-flow estimate
/// on the cutoff gradient and the global L^2 gradient bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct H1Report {
    /// (1/2A) sum_j int |grad F_j'([rho_j]_alpha)|^2
    pub lhs_cut: f64,
    /// (H_c(prev) - H_c(next))/tau + 2 C_K
    pub rhs_cut: f64,
    /// sum_j int |grad F_j'(rho_j)|^2
    pub lhs_full: f64,
    /// C (dE/tau + 2 C_K^2/lambda E(next) + dH/tau + 2 C_K)
    pub rhs_full: f64,
    pub ratio_cut: f64,
    pub ratio_full: f64,
}

fn grad_sq_integral(vals: &[f64], grid: &Grid1D) -> f64 {
    let dx = grid.dx();
    let n = vals.len();
    let mut acc = 0.0;
    for i in 1..n {
        let d = (vals[i] - vals[i - 1]) / dx;
        acc += d * d;
    }
    acc * dx
}

pub fn h1_diagnostics(
    prev: &DensityPair,
    next: &DensityPair,
    m: &ModelSpec,
    tau: f64,
    alpha: f64,
) -> Result<H1Report> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("cutoff height must be positive: {alpha}")));
    }
    let g = &prev.grid;
    let fprime = |f: &PowerNonlinearity, rho: &[f64], cut: Option<f64>| -> Vec<f64> {
        rho.iter()
            .map(|&r| f.deriv(match cut {
                Some(a) => r.min(a),
                None => r,
            }))
            .collect()
    };
    let a_const = m.f1.deriv2(alpha).max(m.f2.deriv2(alpha)).max(m.f1.deriv2(0.0)).max(m.f2.deriv2(0.0));
    let cut_sum = grad_sq_integral(&fprime(&m.f1, &next.rho1, Some(alpha)), g)
        + grad_sq_integral(&fprime(&m.f2, &next.rho2, Some(alpha)), g);
    let lhs_cut = cut_sum / (2.0 * a_const);
    let dh = (lyapunov::entropy(prev) - lyapunov::entropy(next)) / tau;
    let ck = m.kernel.second_deriv_bound();
    let rhs_cut = dh + 2.0 * ck;
    let lhs_full = grad_sq_integral(&fprime(&m.f1, &next.rho1, None), g)
        + grad_sq_integral(&fprime(&m.f2, &next.rho2, None), g);
    let kappa_max =
        m.kappa.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let denom = 1.0 - 3.0 * kappa_max * kappa_max * m.eps * m.eps;
    let b_const = 12.0 / denom.max(1e-3);
    let c_const = (b_const / alpha).max(2.0 * a_const);
    let de = (lyapunov::energy(prev, m)? - lyapunov::energy(next, m)?) / tau;
    let e_next = lyapunov::energy(next, m)?;
    let rhs_full = c_const * (de + 2.0 * ck * ck / m.kernel.lambda() * e_next + dh + 2.0 * ck);
    Ok(H1Report {
        lhs_cut,
        rhs_cut,
        lhs_full,
        rhs_full,
        ratio_cut: lhs_cut / rhs_cut,
        ratio_full: lhs_full / rhs_full,
    })
}

/// Iterate the scheme for nsteps, recording the same trace schema as the
/// finite-volume integrator and verifying the quasi-continuity estimate
/// d(s, t)^2 <= 2 E_eps(init) (|s - t| + tau) on every recorded pair.
pub fn jko_run(
    init: &DensityPair,
    m: &ModelSpec,
    cfg: &JkoConfig,
    nsteps: usize,
    steady: &SteadyState,
) -> Result<(FlowTrace, DensityPair)> {
    cfg.validate()?;
    if init.grid != steady.pair.grid {
        return Err(Error::GridMismatch("initial pair and steady state grids differ".into()));
    }
    let g = &init.grid;
    let mut x = QuantilePair::from_pair(init, cfg.m)?;
    let e0 = quantile_energy(&x, m, g)?;
    let xbar1 = to_quantiles(&steady.pair.rho1, g, cfg.m)?;
    let xbar2 = to_quantiles(&steady.pair.rho2, g, cfg.m)?;
    let mut trace = FlowTrace::default();
    let mut history: Vec<QuantilePair> = Vec::with_capacity(nsteps + 1);
    let record = |trace: &mut FlowTrace, t: f64, x: &QuantilePair| -> Result<DensityPair> {
        let p = x.to_pair(g)?;
        let mom = p.moments();
        trace.times.push(t);
        trace.e_eps.push(lyapunov::energy(&p, m)?);
        trace.l_eps.push(lyapunov::l_eps(&p, m, steady)?);
        trace.n_eps.push(lyapunov::n_eps(&p, m, steady)?);
        trace.h_c.push(lyapunov::entropy(&p));
        trace.mass1.push(mom.mass1);
        trace.mass2.push(mom.mass2);
        trace.m1_comb.push(mom.m1_1 + mom.m1_2);
        let d1 = w2_of_quantiles(&x.x1, &xbar1)?;
        let d2 = w2_of_quantiles(&x.x2, &xbar2)?;
        trace.w2.push((d1 * d1 + d2 * d2).sqrt());
        trace.l1_err1.push(l1_distance(&p.rho1, &steady.pair.rho1, g));
        trace.l1_err2.push(l1_distance(&p.rho2, &steady.pair.rho2, g));
        Ok(p)
    };
    let mut last = record(&mut trace, 0.0, &x)?;
    history.push(x.clone());
    for k in 1..=nsteps {
        x = jko_step(&x, m, cfg, g)?;
        last = record(&mut trace, k as f64 * cfg.tau, &x)?;
        history.push(x.clone());
    }
    // Quasi-continuity over all recorded index pairs.
    let dm = 1.0 / cfg.m as f64;
    for s in 0..history.len() {
        for t in (s + 1)..history.len() {
            let mut d2 = 0.0;
            for (a, b) in history[s].x1.iter().zip(&history[t].x1) {
                d2 += (a - b) * (a - b);
            }
            for (a, b) in history[s].x2.iter().zip(&history[t].x2) {
                d2 += (a - b) * (a - b);
            }
            d2 *= dm;
            let gap_t = (t - s) as f64 * cfg.tau;
            let bound = 2.0 * e0 * (gap_t + cfg.tau);
            if d2 > bound * (1.0 + 1e-12) {
                return Err(Error::Numeric(format!(
                    "quasi-continuity violated between records {s} and {t}: d^2 = {d2:e} > {bound:e}"
                )));
            }
        }
    }
    trace.e_ref = lyapunov::energy(&steady.pair, m)?;
    trace.l_ref = lyapunov::l_eps(&steady.pair, m, steady)?;
    Ok((trace, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{integrate, uniform_density, w2_pair_distance};
    use crate::model::Kernel;
    use crate::steady::solve_steady_quadratic;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(eps: f64) -> ModelSpec {
        ModelSpec::new(2.0, 2.0, 3.0, 3.0, 4.0, Kernel::Quadratic { lambda: 1.0 }, eps).unwrap()
    }

    fn grid() -> Grid1D {
        Grid1D::new(4.0, 512).unwrap()
    }

    fn uniform_quantiles(m: usize) -> QuantilePair {
        let x: Vec<f64> = (0..m).map(|k| -0.5 + (k as f64 + 0.5) / m as f64).collect();
        QuantilePair::new(x.clone(), x).unwrap()
    }

    fn random_monotone(rng: &mut ChaCha8Rng, m: usize, spread: f64) -> Vec<f64> {
        let mut x: Vec<f64> = (0..m).map(|_| rng.gen_range(-spread..spread)).collect();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        x
    }

    #[test]
    fn pav_projects_onto_monotone_cone() {
        let y = vec![1.0, 3.0, 2.0, 4.0];
        assert_eq!(pav(&y), vec![1.0, 2.5, 2.5, 4.0]);
        let sorted = vec![-1.0, 0.0, 2.0];
        assert_eq!(pav(&sorted), sorted);
        let rev = vec![3.0, 2.0, 1.0];
        assert_eq!(pav(&rev), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn objective_at_fixed_point_is_energy() {
        let g = grid();
        let m = model(0.0);
        let x = uniform_quantiles(256);
        let e = quantile_energy(&x, &m, &g).unwrap();
        let obj = jko_objective(&x, &x, &m, 1e-3, &g).unwrap();
        assert_abs_diff_eq!(obj, e, epsilon = 1e-14);
        // Both species uniform on [-1/2, 1/2]: E = 2 * 1/2 + 1/12, up to the
        // O(1/m) Lagrangian quadrature bias.
        assert_abs_diff_eq!(e, 1.0 + 1.0 / 12.0, epsilon = 2.0 / 256.0);
    }

    #[test]
    fn objective_rejects_bad_quantiles() {
        let g = grid();
        let m = model(0.0);
        let x = uniform_quantiles(64);
        let mut bad = x.clone();
        bad.x1.swap(10, 11);
        assert!(jko_objective(&bad, &x, &m, 1e-3, &g).is_err());
        let mut tied = x.clone();
        tied.x1[20] = tied.x1[21];
        let v = jko_objective(&tied, &x, &m, 1e-3, &g).unwrap();
        assert!(v.is_infinite());
    }

    #[test]
    fn step_from_steady_barely_moves() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let xhat = QuantilePair::from_pair(&s.pair, 256).unwrap();
        let cfg = JkoConfig { tau: 1e-3, m: 256, opt: OptConfig { tol: 1e-9, ..Default::default() } };
        let x = jko_step(&xhat, &m, &cfg, &g).unwrap();
        let d1 = w2_of_quantiles(&x.x1, &xhat.x1).unwrap();
        let d2 = w2_of_quantiles(&x.x2, &xhat.x2).unwrap();
        // The quantile-side minimizer sits within discretization distance
        // of the EL profile.
        assert!(d1.hypot(d2) < 2.0 * g.dx(), "moved {}", d1.hypot(d2));
    }

    #[test]
    fn step_inequality_random_starts() {
        let g = grid();
        let m = model(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = JkoConfig {
            tau: 1e-2,
            m: 64,
            opt: OptConfig { tol: 1e-8, max_iters: 300, ..Default::default() },
        };
        for _ in 0..50 {
            let xhat = QuantilePair::new(
                random_monotone(&mut rng, 64, 1.0),
                random_monotone(&mut rng, 64, 1.0),
            )
            .unwrap();
            let x = jko_step(&xhat, &m, &cfg, &g).unwrap();
            let e_hat = quantile_energy(&xhat, &m, &g).unwrap();
            let e_plus = quantile_energy(&x, &m, &g).unwrap();
            let lhs = distance_sq(&x, &xhat) / (2.0 * cfg.tau);
            assert!(
                lhs <= e_hat - e_plus + 1e-6,
                "step inequality violated: {lhs} vs {}",
                e_hat - e_plus
            );
        }
    }

    #[test]
    fn energy_sequence_nonincreasing() {
        let g = grid();
        let m = model(0.05);
        let cfg = JkoConfig { tau: 5e-3, m: 128, ..Default::default() };
        let mut x = uniform_quantiles(128);
        let mut prev_e = quantile_energy(&x, &m, &g).unwrap();
        for _ in 0..20 {
            x = jko_step(&x, &m, &cfg, &g).unwrap();
            let e = quantile_energy(&x, &m, &g).unwrap();
            assert!(e <= prev_e + 1e-12, "energy rose: {prev_e} -> {e}");
            prev_e = e;
        }
    }

    #[test]
    fn weak_residual_constant_zeta_vanishes() {
        let g = grid();
        let m = model(0.05);
        let rho = uniform_density(&g, -0.5, 0.5).unwrap();
        let prev = DensityPair::new(g, rho.clone(), rho).unwrap();
        let cfg = JkoConfig { tau: 1e-2, m: 128, ..Default::default() };
        let x = jko_step(&QuantilePair::from_pair(&prev, 128).unwrap(), &m, &cfg, &g).unwrap();
        let next = x.to_pair(&g).unwrap();
        // Infinite width degenerates to the constant function.
        let z = Zeta::new(0.0, f64::INFINITY, 0, &g).unwrap();
        let (r1, r2, _) = weak_residual(&prev, &next, &m, cfg.tau, &[z]).unwrap();
        assert_abs_diff_eq!(r1, 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(r2, 0.0, epsilon = 1e-13);
    }

    #[test]
    fn weak_residual_bound_on_steps() {
        let g = grid();
        let m = model(0.05);
        let zetas = default_zeta_set(&g).unwrap();
        let cfg = JkoConfig { tau: 1e-2, m: 256, ..Default::default() };
        let rho1 = uniform_density(&g, -1.0, 0.2).unwrap();
        let rho2 = uniform_density(&g, -0.2, 1.0).unwrap();
        let mut prev = DensityPair::new(g, rho1, rho2).unwrap();
        let mut x = QuantilePair::from_pair(&prev, 256).unwrap();
        for _ in 0..10 {
            x = jko_step(&x, &m, &cfg, &g).unwrap();
            let next = x.to_pair(&g).unwrap();
            let (r1, r2, bound) = weak_residual(&prev, &next, &m, cfg.tau, &zetas).unwrap();
            assert!(
                r1 + r2 <= bound * 1.05,
                "residual {} exceeds bound {bound}",
                r1 + r2
            );
            prev = next;
        }
    }

    #[test]
    fn weak_residual_small_at_steady() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let zetas = default_zeta_set(&g).unwrap();
        let (r1, r2, _) = weak_residual(&s.pair, &s.pair, &m, 1e-2, &zetas).unwrap();
        // Pure quadrature error: difference quotient is exactly zero, the
        // flux term vanishes up to the interpolation error at the kink.
        assert!(r1 + r2 < 5e-2, "steady residual {}", r1 + r2);
    }

    #[test]
    fn h1_diagnostics_hold() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let rep = h1_diagnostics(&s.pair, &s.pair, &m, 1e-2, 0.3).unwrap();
        assert!(rep.rhs_cut >= 2.0 * m.kernel.second_deriv_bound() - 1e-12);
        assert!(rep.ratio_cut <= 1.1, "cut ratio {}", rep.ratio_cut);
        assert!(rep.lhs_full.is_finite() && rep.lhs_full > 0.0);

        // A real step away from a rough start.
        let cfg = JkoConfig { tau: 1e-2, m: 256, ..Default::default() };
        let rho = uniform_density(&g, -0.6, 0.6).unwrap();
        let prev = DensityPair::new(g, rho.clone(), rho).unwrap();
        let x = jko_step(&QuantilePair::from_pair(&prev, 256).unwrap(), &m, &cfg, &g).unwrap();
        let next = x.to_pair(&g).unwrap();
        let rep = h1_diagnostics(&prev, &next, &m, cfg.tau, 0.5).unwrap();
        assert!(rep.ratio_cut <= 1.1, "cut ratio {}", rep.ratio_cut);
        assert!(rep.ratio_full <= 1.1, "full ratio {}", rep.ratio_full);
    }

    #[test]
    fn h1_cutoff_above_max_is_identity() {
        let g = grid();
        let m = model(0.0);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let alpha = 10.0;
        let rep = h1_diagnostics(&s.pair, &s.pair, &m, 1e-2, alpha).unwrap();
        let a_const = 1.0; // F'' = 1 for a = 2
        assert_abs_diff_eq!(rep.lhs_cut * 2.0 * a_const, rep.lhs_full, epsilon = 1e-12);
    }

    #[test]
    fn run_checks_quasi_continuity_and_energy() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let rho = uniform_density(&g, -0.5, 0.5).unwrap();
        let init = DensityPair::new(g, rho.clone(), rho).unwrap();
        let cfg = JkoConfig {
            tau: 5e-3,
            m: 128,
            opt: OptConfig { tol: 1e-7, ..Default::default() },
        };
        let (trace, end) = jko_run(&init, &m, &cfg, 30, &s).unwrap();
        assert_eq!(trace.len(), 31);
        // W2 distance to the steady state shrinks.
        assert!(trace.w2.last().unwrap() < &(0.7 * trace.w2[0]));
        assert!(end.rho1.iter().all(|r| *r >= 0.0));
        for i in 0..trace.len() {
            assert_abs_diff_eq!(trace.mass1[i], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(trace.mass2[i], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn matches_fv_integrator() {
        // Cross-integrator agreement at T = 0.5 on a coarser grid than the
        // acceptance run, to keep the unit suite quick.
        let g = Grid1D::new(4.0, 256).unwrap();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let rho = uniform_density(&g, -0.5, 0.5).unwrap();
        let init = DensityPair::new(g, rho.clone(), rho).unwrap();
        let fcfg = crate::flow::FlowConfig { t_final: 0.5, ..Default::default() };
        let (_, fv_end) = crate::flow::run_flow(&init, &m, &s, &fcfg).unwrap();
        let jcfg = JkoConfig {
            tau: 5e-3,
            m: 128,
            opt: OptConfig { tol: 1e-7, ..Default::default() },
        };
        let (_, jko_end) = jko_run(&init, &m, &jcfg, 100, &s).unwrap();
        let d = w2_pair_distance(&fv_end, &jko_end, 128).unwrap();
        assert!(d < 0.05, "integrators disagree: W2 = {d}");
        let mass = integrate(&jko_end.rho1, &g);
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-9);
    }
}
