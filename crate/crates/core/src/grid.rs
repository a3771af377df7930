//! 1D spatial discretization: uniform cell-centered grids, midpoint
//! quadrature, direct kernel convolution, moments, and exact 1D Wasserstein
//! geometry through quantile functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Kernel;

pub const MASS_TOL: f64 = 1e-10;
pub const COM_TOL: f64 = 1e-8;

/// Uniform cell-centered grid on [-L, L].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub half_width: f64,
    pub n: usize,
}

impl Grid1D {
    pub fn new(half_width: f64, n: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grid half-width must be positive, got {half_width}"
            )));
        }
        if n < 8 {
            return Err(Error::InvalidParameter(format!(
                "grid must have at least 8 cells, got {n}"
            )));
        }
        Ok(Self { half_width, n })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }
}

/// Midpoint-rule integral of cell averages.
pub fn integrate(values: &[f64], grid: &Grid1D) -> f64 {
    values.iter().sum::<f64>() * grid.dx()
}

/// Moments (mass, first, second) of a single density.
pub fn moments_of(rho: &[f64], grid: &Grid1D) -> (f64, f64, f64) {
    let dx = grid.dx();
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, &r) in rho.iter().enumerate() {
        let x = grid.center(i);
        m0 += r;
        m1 += x * r;
        m2 += x * x * r;
    }
    (m0 * dx, m1 * dx, m2 * dx)
}

/// Two nonnegative unit-mass densities sharing a grid, with combined center
/// of mass at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPair {
    pub grid: Grid1D,
    pub rho1: Vec<f64>,
    pub rho2: Vec<f64>,
}

/// All moments of a pair, in the order (mass1, mass2, m1_1, m1_2, m2_1, m2_2).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairMoments {
    pub mass1: f64,
    pub mass2: f64,
    pub m1_1: f64,
    pub m1_2: f64,
    pub m2_1: f64,
    pub m2_2: f64,
}

impl DensityPair {
    /// Validating constructor: nonnegativity, unit masses, combined center
    /// of mass at the origin.
    pub fn new(grid: Grid1D, rho1: Vec<f64>, rho2: Vec<f64>) -> Result<Self> {
        let p = Self::new_unchecked(grid, rho1, rho2)?;
        let m = p.moments();
        if (m.mass1 - 1.0).abs() > MASS_TOL || (m.mass2 - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!(
                "densities must have unit mass, got ({}, {})",
                m.mass1, m.mass2
            )));
        }
        if (m.m1_1 + m.m1_2).abs() > COM_TOL {
            return Err(Error::Domain(format!(
                "combined center of mass must be 0, got {}",
                m.m1_1 + m.m1_2
            )));
        }
        Ok(p)
    }

    /// Shape/sign checks only; used by solvers for intermediate states.
    pub fn new_unchecked(grid: Grid1D, rho1: Vec<f64>, rho2: Vec<f64>) -> Result<Self> {
        if rho1.len() != grid.n || rho2.len() != grid.n {
            return Err(Error::GridMismatch(format!(
                "density length ({}, {}) does not match grid ({})",
                rho1.len(),
                rho2.len(),
                grid.n
            )));
        }
        for rho in [&rho1, &rho2] {
            if rho.iter().any(|&r| !r.is_finite() || r < 0.0) {
                return Err(Error::Domain("densities must be finite and nonnegative".into()));
            }
        }
        Ok(Self { grid, rho1, rho2 })
    }

    pub fn moments(&self) -> PairMoments {
        let (mass1, m1_1, m2_1) = moments_of(&self.rho1, &self.grid);
        let (mass2, m1_2, m2_2) = moments_of(&self.rho2, &self.grid);
        PairMoments { mass1, mass2, m1_1, m1_2, m2_1, m2_2 }
    }

    /// Shift both densities by v = -(m1[rho1] + m1[rho2]) / 2 so the combined
    /// center of mass sits at the origin, then renormalize the masses lost to
    /// interpolation.
    pub fn recenter(&self) -> Result<DensityPair> {
        let m = self.moments();
        let v = -(m.m1_1 + m.m1_2) / 2.0;
        if v.abs() > self.grid.half_width / 2.0 {
            return Err(Error::Domain(format!(
                "recentering shift {v} exceeds half the domain half-width"
            )));
        }
        let rho1 = shift_density(&self.rho1, &self.grid, v);
        let rho2 = shift_density(&self.rho2, &self.grid, v);
        let mut p = DensityPair::new_unchecked(self.grid, rho1, rho2)?;
        let pm = p.moments();
        for r in p.rho1.iter_mut() {
            *r /= pm.mass1;
        }
        for r in p.rho2.iter_mut() {
            *r /= pm.mass2;
        }
        Ok(p)
    }
}

/// Translate a density by v using linear interpolation between cell centers;
/// mass outside the box is dropped (callers renormalize).
pub fn shift_density(rho: &[f64], grid: &Grid1D, v: f64) -> Vec<f64> {
    if v == 0.0 {
        return rho.to_vec();
    }
    let n = grid.n;
    let dx = grid.dx();
    let mut out = vec![0.0; n];
    for i in 0..n {
        // Sample the original density at x_i - v.
        let s = (grid.center(i) - v + grid.half_width) / dx - 0.5;
        let k = s.floor();
        let frac = s - k;
        let k = k as isize;
        let at = |j: isize| -> f64 {
            if j < 0 || j >= n as isize {
                0.0
            } else {
                rho[j as usize]
            }
        };
        out[i] = ((1.0 - frac) * at(k) + frac * at(k + 1)).max(0.0);
    }
    out
}

/// Direct O(n^2) convolution (K * rho)(x_i) = sum_k K(x_i - x_k) rho_k dx.
pub fn convolve(kernel: &Kernel, rho: &[f64], grid: &Grid1D) -> Vec<f64> {
    let dx = grid.dx();
    let n = grid.n;
    if let Kernel::Quadratic { lambda } = kernel {
        // Quadratic kernel reduces to moments: K*rho = lambda/2 (x^2 m0 - 2 x m1 + m2).
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let x = grid.center(k);
            m0 += rho[k];
            m1 += x * rho[k];
            m2 += x * x * rho[k];
        }
        m0 *= dx;
        m1 *= dx;
        m2 *= dx;
        return (0..n)
            .map(|i| {
                let x = grid.center(i);
                0.5 * lambda * (x * x * m0 - 2.0 * x * m1 + m2)
            })
            .collect();
    }
    // The kernel only depends on the center difference (i - k) dx.
    let kvals: Vec<f64> = (0..n).map(|d| kernel.eval(d as f64 * dx)).collect();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            let d = if i >= k { i - k } else { k - i };
            acc += kvals[d] * rho[k];
        }
        out[i] = acc * dx;
    }
    out
}

/// Monotone inverse-CDF samples of both species at mass levels (k + 1/2)/m.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantilePair {
    pub m: usize,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl QuantilePair {
    pub fn new(x1: Vec<f64>, x2: Vec<f64>) -> Result<Self> {
        if x1.len() != x2.len() || x1.is_empty() {
            return Err(Error::GridMismatch(format!(
                "quantile arrays must be equal-length and nonempty, got ({}, {})",
                x1.len(),
                x2.len()
            )));
        }
        for x in [&x1, &x2] {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("quantiles must be finite".into()));
            }
            if x.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Domain("quantiles must be nondecreasing".into()));
            }
        }
        let m = x1.len();
        Ok(Self { m, x1, x2 })
    }

    pub fn from_pair(p: &DensityPair, m: usize) -> Result<Self> {
        Ok(Self {
            m,
            x1: to_quantiles(&p.rho1, &p.grid, m)?,
            x2: to_quantiles(&p.rho2, &p.grid, m)?,
        })
    }

    pub fn to_pair(&self, grid: &Grid1D) -> Result<DensityPair> {
        DensityPair::new_unchecked(
            *grid,
            from_quantiles(&self.x1, grid)?,
            from_quantiles(&self.x2, grid)?,
        )
    }
}

/// Invert the piecewise-linear CDF of a piecewise-constant density at the
/// levels (k + 1/2)/m. Ties at zero-density plateaus take the leftmost
/// preimage.
pub fn to_quantiles(rho: &[f64], grid: &Grid1D, m: usize) -> Result<Vec<f64>> {
    if m < 4 {
        return Err(Error::InvalidParameter(format!("quantile count too small: {m}")));
    }
    let dx = grid.dx();
    let n = grid.n;
    let mass: f64 = rho.iter().sum::<f64>() * dx;
    if mass <= 0.0 {
        return Err(Error::Domain("cannot take quantiles of a zero-mass density".into()));
    }
    // cum[i] = CDF at the right edge of cell i-1, normalized to 1.
    let mut cum = vec![0.0; n + 1];
    for i in 0..n {
        cum[i + 1] = cum[i] + rho[i] * dx / mass;
    }
    cum[n] = 1.0;
    let mut out = Vec::with_capacity(m);
    let mut i = 0usize;
    for k in 0..m {
        let level = (k as f64 + 0.5) / m as f64;
        while i < n && cum[i + 1] < level {
            i += 1;
        }
        // Leftmost cell whose right-edge CDF reaches the level.
        let x_left = -grid.half_width + i as f64 * dx;
        let span = cum[i + 1] - cum[i];
        let x = if span > 0.0 {
            x_left + dx * (level - cum[i]) / span
        } else {
            x_left
        };
        out.push(x);
    }
    Ok(out)
}

/// Deposit the quantile masses back onto the grid: each of the m mass
/// packets of weight 1/m is spread uniformly over the interval between the
/// midpoints of its neighboring quantiles, split conservatively across the
/// cells it overlaps.
pub fn from_quantiles(x: &[f64], grid: &Grid1D) -> Result<Vec<f64>> {
    let m = x.len();
    if m < 4 {
        return Err(Error::InvalidParameter(format!("quantile count too small: {m}")));
    }
    let w = 1.0 / m as f64;
    let mut rho = vec![0.0; grid.n];
    for k in 0..m {
        let (a, b) = packet_interval(x, k);
        deposit_packet(&mut rho, grid, a, b, x[k], w);
    }
    Ok(rho)
}

/// Half-open deposit interval [a_k, b_k) of packet k: between the midpoints
/// of its neighboring quantiles, extrapolated at the two ends.
pub(crate) fn packet_interval(x: &[f64], k: usize) -> (f64, f64) {
    let m = x.len();
    let a = if k == 0 {
        x[0] - 0.5 * (x[1] - x[0]).max(f64::EPSILON)
    } else {
        0.5 * (x[k - 1] + x[k])
    };
    let b = if k == m - 1 {
        x[m - 1] + 0.5 * (x[m - 1] - x[m - 2]).max(f64::EPSILON)
    } else {
        0.5 * (x[k] + x[k + 1])
    };
    (a, b)
}

/// Spread mass w uniformly over [a, b), split conservatively across the
/// cells it overlaps (clamped to the box). w may be negative to undo a
/// previous deposit.
pub(crate) fn deposit_packet(rho: &mut [f64], grid: &Grid1D, a: f64, b: f64, xk: f64, w: f64) {
    let dx = grid.dx();
    let n = grid.n;
    let (a, b) = (a.max(-grid.half_width), b.min(grid.half_width));
    if b <= a {
        // Degenerate packet: deposit into the single containing cell.
        let i = (((xk + grid.half_width) / dx).floor() as isize).clamp(0, n as isize - 1);
        rho[i as usize] += w / dx;
        return;
    }
    let density = w / (b - a);
    let i0 = (((a + grid.half_width) / dx).floor() as isize).clamp(0, n as isize - 1) as usize;
    let i1 = (((b + grid.half_width) / dx).ceil() as isize).clamp(1, n as isize) as usize;
    for i in i0..i1 {
        let cl = -grid.half_width + i as f64 * dx;
        let cr = cl + dx;
        let overlap = (b.min(cr) - a.max(cl)).max(0.0);
        rho[i] += density * overlap / dx;
    }
}

/// Exact 1D Wasserstein-2 distance of two quantile vectors on the same
/// uniform mass grid.
pub fn w2_of_quantiles(xa: &[f64], xb: &[f64]) -> Result<f64> {
    if xa.len() != xb.len() {
        return Err(Error::GridMismatch(format!(
            "quantile lengths differ: {} vs {}",
            xa.len(),
            xb.len()
        )));
    }
    let m = xa.len() as f64;
    let s: f64 = xa.iter().zip(xb).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / m).sqrt())
}

/// W2 distance between two unit-mass densities via m-point quantiles.
pub fn w2_distance(p: &[f64], q: &[f64], grid: &Grid1D, m: usize) -> Result<f64> {
    let xp = to_quantiles(p, grid, m)?;
    let xq = to_quantiles(q, grid, m)?;
    w2_of_quantiles(&xp, &xq)
}

/// W2 distance of density pairs: sqrt(W2(rho1)^2 + W2(rho2)^2).
pub fn w2_pair_distance(p: &DensityPair, q: &DensityPair, m: usize) -> Result<f64> {
    if p.grid != q.grid {
        return Err(Error::GridMismatch("pairs live on different grids".into()));
    }
    let d1 = w2_distance(&p.rho1, &q.rho1, &p.grid, m)?;
    let d2 = w2_distance(&p.rho2, &q.rho2, &p.grid, m)?;
    Ok((d1 * d1 + d2 * d2).sqrt())
}

/// L1 distance of two cell-average fields.
pub fn l1_distance(p: &[f64], q: &[f64], grid: &Grid1D) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() * grid.dx()
}

/// Random pair with zero combined center of mass: species 1 is a normalized
/// mixture of 1-3 Gaussian bumps, species 2 its mirror image, so the combined
/// first moment vanishes exactly on the symmetric grid.
pub fn random_x0_pair(grid: &Grid1D, rng: &mut impl rand::Rng) -> Result<DensityPair> {
    let bumps = rng.gen_range(1..=3usize);
    let mut rho1 = vec![0.0; grid.n];
    for _ in 0..bumps {
        let c = rng.gen_range(-0.25 * grid.half_width..0.25 * grid.half_width);
        let w = rng.gen_range(0.15..0.5);
        let amp = rng.gen_range(0.2..1.0);
        for (i, r) in rho1.iter_mut().enumerate() {
            let z = (grid.center(i) - c) / w;
            *r += amp * (-0.5 * z * z).exp();
        }
    }
    let mass = integrate(&rho1, grid);
    for r in rho1.iter_mut() {
        *r /= mass;
    }
    let rho2: Vec<f64> = rho1.iter().rev().copied().collect();
    DensityPair::new(*grid, rho1, rho2)
}

/// Uniform unit-mass density on [lo, hi], rasterized with exact cell overlaps.
pub fn uniform_density(grid: &Grid1D, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(hi > lo) {
        return Err(Error::InvalidParameter(format!("empty interval [{lo}, {hi}]")));
    }
    let dx = grid.dx();
    let height = 1.0 / (hi - lo);
    let mut rho = vec![0.0; grid.n];
    for i in 0..grid.n {
        let cl = -grid.half_width + i as f64 * dx;
        let cr = cl + dx;
        let overlap = (hi.min(cr) - lo.max(cl)).max(0.0);
        rho[i] = height * overlap / dx;
    }
    let mass = rho.iter().sum::<f64>() * dx;
    if (mass - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!(
            "interval [{lo}, {hi}] is not contained in the grid (mass {mass})"
        )));
    }
    Ok(rho)
}
