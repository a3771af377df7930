//! The auxiliary convex functional L, the non-convex remainder N, the
//! three-term decomposition of the L-gap, convexity and slope probes,
//! Csiszar-Kullback checks and exponential decay-rate fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    convolve, l1_distance, to_quantiles, w2_of_quantiles, w2_pair_distance, DensityPair,
};
use crate::model::{CouplingDeriv, ModelSpec};
use crate::steady::SteadyState;

/// Energy E_eps = int [F1 + F2 + eps h] dx + int rho1 K*rho2 dx.
pub fn energy(p: &DensityPair, m: &ModelSpec) -> Result<f64> {
    let g = &p.grid;
    let conv2 = convolve(&m.kernel, &p.rho2, g);
    let mut acc = 0.0;
    for i in 0..g.n {
        let (r1, r2) = (p.rho1[i], p.rho2[i]);
        acc += m.f1.value(r1)
            + m.f2.value(r2)
            + m.eps * m.coupling.eval(CouplingDeriv::H, r1, r2)?
            + r1 * conv2[i];
    }
    Ok(acc * g.dx())
}

/// L_eps = int [F1 + F2 + rho1 K*rho2 + eps (rho1 V1 + rho2 V2)] dx with the
/// potentials V_j frozen at the steady state.
pub fn l_eps(p: &DensityPair, m: &ModelSpec, s: &SteadyState) -> Result<f64> {
    check_grids(p, s)?;
    let g = &p.grid;
    let conv2 = convolve(&m.kernel, &p.rho2, g);
    let mut acc = 0.0;
    for i in 0..g.n {
        let (r1, r2) = (p.rho1[i], p.rho2[i]);
        acc += m.f1.value(r1)
            + m.f2.value(r2)
            + r1 * conv2[i]
            + m.eps * (r1 * s.v1[i] + r2 * s.v2[i]);
    }
    Ok(acc * g.dx())
}

/// N_eps = int [h(rho1, rho2) - (rho1 V1 + rho2 V2)] dx.
pub fn n_eps(p: &DensityPair, m: &ModelSpec, s: &SteadyState) -> Result<f64> {
    check_grids(p, s)?;
    let g = &p.grid;
    let mut acc = 0.0;
    for i in 0..g.n {
        let (r1, r2) = (p.rho1[i], p.rho2[i]);
        acc += m.coupling.eval(CouplingDeriv::H, r1, r2)? - (r1 * s.v1[i] + r2 * s.v2[i]);
    }
    Ok(acc * g.dx())
}

/// Combined negative entropy H_c = int [rho1 log rho1 + rho2 log rho2] dx,
/// with the convention 0 log 0 = 0.
pub fn entropy(p: &DensityPair) -> f64 {
    let xlogx = |r: f64| if r > 0.0 { r * r.ln() } else { 0.0 };
    p.rho1
        .iter()
        .zip(&p.rho2)
        .map(|(&a, &b)| xlogx(a) + xlogx(b))
        .sum::<f64>()
        * p.grid.dx()
}

fn check_grids(p: &DensityPair, s: &SteadyState) -> Result<()> {
    if p.grid != s.pair.grid {
        return Err(Error::GridMismatch(
            "pair and steady state live on different grids".into(),
        ));
    }
    Ok(())
}

/// Evaluation of the L-gap decomposition and related scalars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub e_eps: f64,
    pub l_eps: f64,
    pub n_eps: f64,
    pub l_gap: f64,
    pub i_f: f64,
    pub i_k: f64,
    pub k_fun: f64,
    pub identity_residual: f64,
}

/// Compute L_eps, N_eps and the decomposition
/// L(rho) - L(rhobar) = I_F + I_K + K, reporting the identity residual.
pub fn lyapunov_decomposition(
    p: &DensityPair,
    m: &ModelSpec,
    s: &SteadyState,
) -> Result<LyapunovReport> {
    check_grids(p, s)?;
    let g = &p.grid;
    let dx = g.dx();
    let e = energy(p, m)?;
    let l = l_eps(p, m, s)?;
    let n = n_eps(p, m, s)?;
    let l_bar = l_eps(&s.pair, m, s)?;
    let l_gap = l - l_bar;

    let conv_bar1 = convolve(&m.kernel, &s.pair.rho1, g);
    let conv_bar2 = convolve(&m.kernel, &s.pair.rho2, g);
    let diff2: Vec<f64> = p.rho2.iter().zip(&s.pair.rho2).map(|(a, b)| a - b).collect();
    let conv_diff2 = convolve(&m.kernel, &diff2, g);

    let (mut i_f, mut i_k, mut k_fun) = (0.0, 0.0, 0.0);
    for i in 0..g.n {
        i_f += m.f1.bregman(p.rho1[i], s.pair.rho1[i])?
            + m.f2.bregman(p.rho2[i], s.pair.rho2[i])?;
        i_k += (conv_bar2[i] - s.c1).max(0.0) * p.rho1[i]
            + (conv_bar1[i] - s.c2).max(0.0) * p.rho2[i];
        k_fun += (p.rho1[i] - s.pair.rho1[i]) * conv_diff2[i];
    }
    i_f *= dx;
    i_k *= dx;
    k_fun *= dx;

    Ok(LyapunovReport {
        e_eps: e,
        l_eps: l,
        n_eps: n,
        l_gap,
        i_f,
        i_k,
        k_fun,
        identity_residual: (l_gap - (i_f + i_k + k_fun)).abs(),
    })
}

/// Csiszar-Kullback ratio (|rho1 - rhobar1|_L1^2 + |rho2 - rhobar2|_L1^2) / L-gap.
pub fn ck_check(p: &DensityPair, s: &SteadyState, m: &ModelSpec) -> Result<f64> {
    check_grids(p, s)?;
    let g = &p.grid;
    let d1 = l1_distance(&p.rho1, &s.pair.rho1, g);
    let d2 = l1_distance(&p.rho2, &s.pair.rho2, g);
    let num = d1 * d1 + d2 * d2;
    if num == 0.0 {
        return Ok(0.0);
    }
    let gap = l_eps(p, m, s)? - l_eps(&s.pair, m, s)?;
    if gap <= 0.0 {
        return Err(Error::Numeric(format!(
            "Csiszar-Kullback violation: L-gap {gap:e} with L1 error {num:e}"
        )));
    }
    Ok(num / gap)
}

/// Ratio |N(rho) - N(rhobar)| / (L(rho) - L(rhobar)); 0 at the steady state.
pub fn n_vs_l_check(p: &DensityPair, m: &ModelSpec, s: &SteadyState) -> Result<f64> {
    check_grids(p, s)?;
    let n_gap = n_eps(p, m, s)? - n_eps(&s.pair, m, s)?;
    let l_gap = l_eps(p, m, s)? - l_eps(&s.pair, m, s)?;
    if n_gap.abs() == 0.0 && l_gap.abs() < 1e-14 {
        return Ok(0.0);
    }
    if l_gap <= 0.0 {
        return Err(Error::Numeric(format!(
            "N-vs-L violation: L-gap {l_gap:e} with N-gap {n_gap:e}"
        )));
    }
    Ok(n_gap.abs() / l_gap)
}

/// Interaction energy of a pair, int rho1 K*rho2 dx.
pub fn interaction_energy(p: &DensityPair, m: &ModelSpec) -> f64 {
    let conv2 = convolve(&m.kernel, &p.rho2, &p.grid);
    p.rho1.iter().zip(&conv2).map(|(a, b)| a * b).sum::<f64>() * p.grid.dx()
}

/// Minimum convexity slack of the interaction energy along the displacement
/// interpolation between p and q:
/// (1-s) I(0) + s I(1) - (lambda/2) s(1-s) d^2 - I(s), minimized over s.
pub fn geodesic_convexity_probe(
    p: &DensityPair,
    q: &DensityPair,
    m: &ModelSpec,
    s_samples: &[f64],
    quantiles: usize,
) -> Result<f64> {
    if p.grid != q.grid {
        return Err(Error::GridMismatch("pairs live on different grids".into()));
    }
    let g = &p.grid;
    let xp1 = to_quantiles(&p.rho1, g, quantiles)?;
    let xp2 = to_quantiles(&p.rho2, g, quantiles)?;
    let xq1 = to_quantiles(&q.rho1, g, quantiles)?;
    let xq2 = to_quantiles(&q.rho2, g, quantiles)?;
    let d1 = w2_of_quantiles(&xp1, &xq1)?;
    let d2 = w2_of_quantiles(&xp2, &xq2)?;
    let dsq = d1 * d1 + d2 * d2;

    // Interaction energy of the interpolant, evaluated directly on the
    // quantile atoms; rasterizing first adds O(dx) noise that swamps the
    // convexity slack.
    let inter_at = |s: f64| -> f64 {
        let x1: Vec<f64> = xp1.iter().zip(&xq1).map(|(a, b)| (1.0 - s) * a + s * b).collect();
        let x2: Vec<f64> = xp2.iter().zip(&xq2).map(|(a, b)| (1.0 - s) * a + s * b).collect();
        let w = 1.0 / (quantiles as f64 * quantiles as f64);
        let mut acc = 0.0;
        for &a in &x1 {
            for &b in &x2 {
                acc += m.kernel.eval(a - b);
            }
        }
        acc * w
    };
    let i0 = inter_at(0.0);
    let i1 = inter_at(1.0);
    let lambda = m.kernel.lambda();
    let mut min_slack = f64::INFINITY;
    for &s in s_samples {
        let is = inter_at(s);
        let slack = (1.0 - s) * i0 + s * i1 - 0.5 * lambda * s * (1.0 - s) * dsq - is;
        min_slack = min_slack.min(slack);
    }
    Ok(min_slack)
}

/// Canonical perturbation families around the steady state, used to estimate
/// the run constants (C_CK, C_N, slope-domination). Each draw contributes an
/// anti-translated steady pair, a uniform pair of random width, and a
/// steady/uniform mixture. The families are smooth one-parameter curves, so
/// suprema over jittered draws are reproducible across seeds; unstructured
/// random-bump pairs give ratio suprema that wander far more than the
/// regression tolerance.
pub fn canonical_pair_family(
    s: &SteadyState,
    rng: &mut impl rand::Rng,
    draws: usize,
) -> Result<Vec<DensityPair>> {
    let g = &s.pair.grid;
    let mut out = Vec::with_capacity(3 * draws);
    for _ in 0..draws {
        let d = rng.gen_range(0.15..0.35);
        let r1 = crate::grid::shift_density(&s.pair.rho1, g, -d);
        let r2 = crate::grid::shift_density(&s.pair.rho2, g, d);
        out.push(DensityPair::new_unchecked(*g, r1, r2)?);

        let w = rng.gen_range(0.6..1.4);
        let rho = crate::grid::uniform_density(g, -w / 2.0, w / 2.0)?;
        out.push(DensityPair::new(*g, rho.clone(), rho)?);

        let th = rng.gen_range(0.2..0.8);
        let rho = crate::grid::uniform_density(g, -0.5, 0.5)?;
        let mix = |bar: &[f64]| -> Vec<f64> {
            bar.iter().zip(&rho).map(|(a, b)| th * a + (1.0 - th) * b).collect()
        };
        out.push(DensityPair::new(*g, mix(&s.pair.rho1), mix(&s.pair.rho2))?);
    }
    Ok(out)
}

/// Centered-difference gradient of a composite potential field; one-sided at
/// the boundary.
pub fn centered_gradient(phi: &[f64], dx: f64) -> Vec<f64> {
    let n = phi.len();
    let mut g = vec![0.0; n];
    for i in 0..n {
        g[i] = if i == 0 {
            (phi[1] - phi[0]) / dx
        } else if i == n - 1 {
            (phi[n - 1] - phi[n - 2]) / dx
        } else {
            (phi[i + 1] - phi[i - 1]) / (2.0 * dx)
        };
    }
    g
}

/// Dissipation-style weighted gradients: lhs is the N-slope, rhs the L-slope.
pub fn slope_domination_probe(
    p: &DensityPair,
    m: &ModelSpec,
    s: &SteadyState,
) -> Result<(f64, f64)> {
    check_grids(p, s)?;
    let g = &p.grid;
    let dx = g.dx();
    let conv1 = convolve(&m.kernel, &p.rho1, g);
    let conv2 = convolve(&m.kernel, &p.rho2, g);
    let mut n1 = vec![0.0; g.n];
    let mut n2 = vec![0.0; g.n];
    let mut l1 = vec![0.0; g.n];
    let mut l2 = vec![0.0; g.n];
    for i in 0..g.n {
        let (r1, r2) = (p.rho1[i], p.rho2[i]);
        let d1 = m.coupling.eval(CouplingDeriv::D1, r1, r2)?;
        let d2 = m.coupling.eval(CouplingDeriv::D2, r1, r2)?;
        n1[i] = d1 - s.v1[i];
        n2[i] = d2 - s.v2[i];
        l1[i] = m.f1.deriv(r1) + m.eps * s.v1[i] + conv2[i];
        l2[i] = m.f2.deriv(r2) + m.eps * s.v2[i] + conv1[i];
    }
    let gn1 = centered_gradient(&n1, dx);
    let gn2 = centered_gradient(&n2, dx);
    let gl1 = centered_gradient(&l1, dx);
    let gl2 = centered_gradient(&l2, dx);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for i in 0..g.n {
        lhs += gn1[i] * gn1[i] * p.rho1[i] + gn2[i] * gn2[i] * p.rho2[i];
        rhs += gl1[i] * gl1[i] * p.rho1[i] + gl2[i] * gl2[i] * p.rho2[i];
    }
    Ok((lhs * dx, rhs * dx))
}

/// A recorded trajectory of the evolution: energies, moments, and distances
/// to the steady state per snapshot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FlowTrace {
    pub times: Vec<f64>,
    pub e_eps: Vec<f64>,
    pub l_eps: Vec<f64>,
    pub n_eps: Vec<f64>,
    pub h_c: Vec<f64>,
    pub mass1: Vec<f64>,
    pub mass2: Vec<f64>,
    pub m1_comb: Vec<f64>,
    pub w2: Vec<f64>,
    pub l1_err1: Vec<f64>,
    pub l1_err2: Vec<f64>,
    /// Reference energy used for decay fits; set by the producer, normally
    /// E_eps of the steady state.
    pub e_ref: f64,
    /// Reference Lyapunov value (L_eps of the steady state), same role as e_ref.
    pub l_ref: f64,
}

impl FlowTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Fitted exponential decay rates over a time window.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate_e: f64,
    pub rate_l1: f64,
    /// Coefficient of determination of the log-linear energy fit.
    pub r2_fit: f64,
}

fn least_squares_slope(ts: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = ts.len() as f64;
    let tbar = ts.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (t, y) in ts.iter().zip(ys) {
        sxy += (t - tbar) * (y - ybar);
        sxx += (t - tbar) * (t - tbar);
        syy += (y - ybar) * (y - ybar);
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Least-squares slope of log(E(t) - e_ref) and of log(L1 error) over the
/// window; rates are the negated slopes. Gap underflow (below 1e-13)
/// truncates the window, and when the run overshoots the window the
/// terminal gap serves as a discretization-floor estimate: samples within
/// a decade of it are dropped so the plateau does not pollute the slope.
pub fn decay_fit(trace: &FlowTrace, window: (f64, f64)) -> Result<DecayFit> {
    let (t0, t1) = window;
    // Fit a series in the window, dropping samples below `floor`. Returns
    // (slope, r2, samples used).
    let fit = |series: &dyn Fn(usize) -> f64, floor: f64| -> Option<(f64, f64, usize)> {
        let mut ts = Vec::new();
        let mut logs = Vec::new();
        for i in 0..trace.len() {
            let t = trace.times[i];
            let v = series(i);
            if t >= t0 && t <= t1 && v > floor.max(1e-13) {
                ts.push(t);
                logs.push(v.ln());
            }
        }
        if ts.len() < 3 {
            return None;
        }
        let (slope, r2) = least_squares_slope(&ts, &logs);
        Some((slope, r2, ts.len()))
    };
    // Primary fit uses every positive-gap sample; if the window mixes a clean
    // exponential with the terminal discretization plateau the fit degrades,
    // and a refit with samples within a decade of the terminal gap removed is
    // accepted when it explains the data better.
    let robust = |series: &dyn Fn(usize) -> f64| -> Option<(f64, f64)> {
        let (slope, r2, _) = fit(series, 0.0)?;
        if r2 >= 0.995 {
            return Some((slope, r2));
        }
        let floor = 10.0 * series(trace.len() - 1).max(0.0);
        match fit(series, floor) {
            Some((s2, r2b, _)) if r2b > r2 => Some((s2, r2b)),
            _ => Some((slope, r2)),
        }
    };
    let gap_at = |i: usize| trace.e_eps[i] - trace.e_ref;
    let l1_at = |i: usize| trace.l1_err1[i] + trace.l1_err2[i];
    let e_fit = robust(&gap_at);
    let l1_fit = robust(&l1_at);
    match (e_fit, l1_fit) {
        (Some((slope_e, r2)), Some((slope_l1, _))) => {
            Ok(DecayFit { rate_e: -slope_e, rate_l1: -slope_l1, r2_fit: r2 })
        }
        _ => Err(Error::Numeric(format!(
            "decay window [{t0}, {t1}] has too few usable samples"
        ))),
    }
}

/// Lower bound check of the L-gap: gap >= (lambda_eps / 2) d(p, rhobar)^2.
pub fn l_convexity_floor(
    p: &DensityPair,
    m: &ModelSpec,
    s: &SteadyState,
    quantiles: usize,
) -> Result<(f64, f64)> {
    let gap = l_eps(p, m, s)? - l_eps(&s.pair, m, s)?;
    let d = w2_pair_distance(p, &s.pair, quantiles)?;
    Ok((gap, 0.5 * s.lambda_eps(m) * d * d))
}

/// Pointwise kernel-gradient estimate: max_x |grad K*(rhobar_j - rho_j)|
/// versus C_K W2(rho_j, rhobar_j).
pub fn kernel_gradient_check(
    p: &DensityPair,
    m: &ModelSpec,
    s: &SteadyState,
    quantiles: usize,
) -> Result<(f64, f64)> {
    check_grids(p, s)?;
    let g = &p.grid;
    let mut worst_lhs: f64 = 0.0;
    let mut worst_rhs: f64 = f64::INFINITY;
    for (rho, rho_bar) in [(&p.rho1, &s.pair.rho1), (&p.rho2, &s.pair.rho2)] {
        let diff: Vec<f64> = rho_bar.iter().zip(rho.iter()).map(|(a, b)| a - b).collect();
        let conv = convolve(&m.kernel, &diff, g);
        let grad = centered_gradient(&conv, g.dx());
        let lhs = grad.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let w = crate::grid::w2_distance(rho, rho_bar, g, quantiles)?;
        let rhs = m.kernel.second_deriv_bound() * w;
        if lhs - rhs > worst_lhs - worst_rhs {
            worst_lhs = lhs;
            worst_rhs = rhs;
        }
    }
    Ok((worst_lhs, worst_rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{integrate, uniform_density, Grid1D};
    use crate::model::Kernel;
    use crate::steady::solve_steady_quadratic;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;

    fn model(eps: f64) -> ModelSpec {
        ModelSpec::new(2.0, 2.0, 3.0, 3.0, 4.0, Kernel::Quadratic { lambda: 1.0 }, eps).unwrap()
    }

    fn grid() -> Grid1D {
        Grid1D::new(4.0, 512).unwrap()
    }

    /// Random unit-mass pair in X0 built by reflection.
    fn random_pair(g: &Grid1D, rng: &mut impl Rng) -> DensityPair {
        let mut rho1: Vec<f64> = (0..g.n)
            .map(|i| {
                let x = g.center(i);
                if x.abs() < 2.0 {
                    rng.gen_range(0.0..1.0) + (1.0 - x * x / 4.0)
                } else {
                    0.0
                }
            })
            .collect();
        let mass = integrate(&rho1, g);
        rho1.iter_mut().for_each(|r| *r /= mass);
        let rho2: Vec<f64> = rho1.iter().rev().copied().collect();
        DensityPair::new(*g, rho1, rho2).unwrap()
    }

    #[test]
    fn energy_uniform_oracle() {
        let g = grid();
        let m = model(0.0);
        let rho = uniform_density(&g, -0.5, 0.5).unwrap();
        let p = DensityPair::new(g, rho.clone(), rho).unwrap();
        assert_relative_eq!(energy(&p, &m).unwrap(), 1.0 + 1.0 / 12.0, max_relative = 1e-3);
    }

    #[test]
    fn energy_h_term_vanishes_on_disjoint_supports() {
        let g = grid();
        let m = model(0.5);
        let rho1 = uniform_density(&g, -2.0, -1.0).unwrap();
        let rho2 = uniform_density(&g, 1.0, 2.0).unwrap();
        let p = DensityPair::new(g, rho1, rho2).unwrap();
        let m0 = model(0.0);
        assert_abs_diff_eq!(
            energy(&p, &m).unwrap(),
            energy(&p, &m0).unwrap(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn energy_lower_bounds_random() {
        let g = grid();
        let m = model(0.05);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = random_pair(&g, &mut rng);
            let e = energy(&p, &m).unwrap();
            let mut f_sum = 0.0;
            for i in 0..g.n {
                f_sum += m.f1.value(p.rho1[i]) + m.f2.value(p.rho2[i]);
            }
            f_sum *= g.dx();
            let inter = interaction_energy(&p, &m);
            assert!(e >= 0.5 * f_sum - 1e-12);
            assert!(e >= inter - 1e-12);
        }
    }

    #[test]
    fn decomposition_identity() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // At the steady state everything vanishes.
        let r = lyapunov_decomposition(&s.pair, &m, &s).unwrap();
        assert_abs_diff_eq!(r.l_gap, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.i_f + r.i_k + r.k_fun, 0.0, epsilon = 1e-12);
        for _ in 0..10 {
            let p = random_pair(&g, &mut rng);
            let r = lyapunov_decomposition(&p, &m, &s).unwrap();
            assert!(r.i_f >= 0.0 && r.i_k >= 0.0);
            assert!(
                r.identity_residual <= 1e-8 * (1.0 + r.l_gap.abs()),
                "residual {} vs gap {}",
                r.identity_residual,
                r.l_gap
            );
            // E = L + eps N.
            assert_relative_eq!(
                r.e_eps,
                r.l_eps + m.eps * r.n_eps,
                max_relative = 1e-10
            );
            // Quadratic kernel: the K functional is nonnegative on X0.
            assert!(r.k_fun >= -1e-10, "K = {}", r.k_fun);
        }
    }

    #[test]
    fn ck_and_nl_ratios() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        assert_eq!(ck_check(&s.pair, &s, &m).unwrap(), 0.0);
        assert_eq!(n_vs_l_check(&s.pair, &m, &s).unwrap(), 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let p = random_pair(&g, &mut rng);
            let ck = ck_check(&p, &s, &m).unwrap();
            assert!(ck.is_finite() && ck > 0.0);
            let nl = n_vs_l_check(&p, &m, &s).unwrap();
            assert!(nl.is_finite());
        }
    }

    #[test]
    fn ck_scaling_stable() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        // Perturb within the support: move mass from the left half to the
        // right half of rho1, mirrored on rho2 to stay in X0.
        let mut ratios = Vec::new();
        for &delta in &[1e-2, 1e-3] {
            let mut p = s.pair.clone();
            for i in 0..g.n {
                let x = g.center(i);
                if p.rho1[i] > 0.05 {
                    let bump = delta * x.signum();
                    p.rho1[i] = (p.rho1[i] * (1.0 + bump)).max(0.0);
                    p.rho2[g.n - 1 - i] = p.rho1[i];
                }
            }
            let mom = p.moments();
            p.rho1.iter_mut().for_each(|r| *r /= mom.mass1);
            p.rho2.iter_mut().for_each(|r| *r /= mom.mass2);
            ratios.push(ck_check(&p, &s, &m).unwrap());
        }
        let rel = (ratios[0] - ratios[1]).abs() / ratios[1];
        assert!(rel < 0.2, "CK ratios {ratios:?}");
    }

    #[test]
    fn l_gap_convexity_floor_random() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let p = random_pair(&g, &mut rng);
            let (gap, floor) = l_convexity_floor(&p, &m, &s, 512).unwrap();
            assert!(gap >= floor - 1e-6, "gap {gap} < floor {floor}");
        }
    }

    #[test]
    fn geodesic_convexity_slack() {
        let g = grid();
        let m = model(0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let svals: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
        // Identical pairs: zero slack.
        let p = random_pair(&g, &mut rng);
        let slack = geodesic_convexity_probe(&p, &p, &m, &svals, 512).unwrap();
        assert_abs_diff_eq!(slack, 0.0, epsilon = 1e-9);
        for _ in 0..5 {
            let p = random_pair(&g, &mut rng);
            let q = random_pair(&g, &mut rng);
            let slack = geodesic_convexity_probe(&p, &q, &m, &svals, 512).unwrap();
            assert!(slack >= -1e-6, "slack {slack}");
        }
    }

    #[test]
    fn geodesic_convexity_translates() {
        // Same shapes translated oppositely (staying in X0): I(s) is a
        // parabola and the slack has the closed form
        // lambda s(1-s) (delta m1)^2 with delta m1 = 1/2 here.
        let g = grid();
        let m = model(0.0);
        let a1 = uniform_density(&g, -1.0, 0.0).unwrap();
        let a2 = uniform_density(&g, 0.0, 1.0).unwrap();
        let b1 = uniform_density(&g, -0.5, 0.5).unwrap();
        let b2 = uniform_density(&g, -0.5, 0.5).unwrap();
        let p = DensityPair::new(g, a1, a2).unwrap();
        let q = DensityPair::new(g, b1, b2).unwrap();
        let svals: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
        let slack = geodesic_convexity_probe(&p, &q, &m, &svals, 1024).unwrap();
        let expect = 0.25 * 0.1 * 0.9;
        assert_abs_diff_eq!(slack, expect, epsilon = 1e-6);
    }

    #[test]
    fn slope_domination_at_steady() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let (lhs, rhs) = slope_domination_probe(&s.pair, &m, &s).unwrap();
        // Both dissipations vanish at the minimizer up to discretization.
        assert!(lhs < 1e-4, "lhs {lhs}");
        assert!(rhs < 1e-2, "rhs {rhs}");
    }

    #[test]
    fn kernel_gradient_pointwise_bound() {
        let g = grid();
        let m = model(0.05);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let p = random_pair(&g, &mut rng);
            let (lhs, rhs) = kernel_gradient_check(&p, &m, &s, 512).unwrap();
            assert!(lhs <= rhs + 10.0 * g.dx(), "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn decay_fit_exact_exponential() {
        let mut tr = FlowTrace::default();
        for k in 0..200 {
            let t = 0.05 * k as f64;
            tr.times.push(t);
            tr.e_eps.push(1.0 + (-2.0 * t).exp());
            tr.l1_err1.push(0.5 * (-1.0 * t).exp());
            tr.l1_err2.push(0.5 * (-1.0 * t).exp());
            tr.l_eps.push(0.0);
            tr.n_eps.push(0.0);
            tr.h_c.push(0.0);
            tr.mass1.push(1.0);
            tr.mass2.push(1.0);
            tr.m1_comb.push(0.0);
            tr.w2.push(0.0);
        }
        tr.e_ref = 1.0;
        let fit = decay_fit(&tr, (1.0, 5.0)).unwrap();
        assert_relative_eq!(fit.rate_e, 2.0, max_relative = 1e-6);
        assert_relative_eq!(fit.rate_l1, 1.0, max_relative = 1e-6);
        assert!(fit.r2_fit > 0.999999);
    }

    #[test]
    fn entropy_convention() {
        let g = grid();
        let rho = uniform_density(&g, -0.5, 0.5).unwrap();
        let p = DensityPair::new(g, rho.clone(), rho).unwrap();
        // Unit-height uniform density: rho log rho = 0 everywhere.
        assert_abs_diff_eq!(entropy(&p), 0.0, epsilon = 1e-10);
        let rho2 = uniform_density(&g, -0.25, 0.25).unwrap();
        let q = DensityPair::new(g, rho2.clone(), rho2).unwrap();
        assert_relative_eq!(entropy(&q), 2.0 * (2.0f64).ln(), max_relative = 1e-2);
    }
}
