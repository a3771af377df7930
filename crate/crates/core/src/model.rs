//! Closed-form evaluation of the power-law model family: nonlinearities,
//! coupling term, interaction kernels, hypothesis audits and the
//! perturbed-identity map used by the steady-state solvers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Power-law diffusion nonlinearity F(r) = r^a / a with a >= 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerNonlinearity {
    a: f64,
}

impl PowerNonlinearity {
    pub fn new(a: f64) -> Result<Self> {
        if !a.is_finite() || a < 2.0 {
            return Err(Error::InvalidParameter(format!(
                "power-law exponent must be finite and >= 2, got {a}"
            )));
        }
        Ok(Self { a })
    }

    pub fn exponent(&self) -> f64 {
        self.a
    }

    /// F(r) = r^a / a
    pub fn value(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0);
        r.powf(self.a) / self.a
    }

    /// F'(r) = r^(a-1)
    pub fn deriv(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0);
        r.powf(self.a - 1.0)
    }

    /// F''(r) = (a-1) r^(a-2)
    pub fn deriv2(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0);
        if self.a == 2.0 {
            return self.a - 1.0;
        }
        (self.a - 1.0) * r.powf(self.a - 2.0)
    }

    /// (F')^{-1}(u) = u^{1/(a-1)}
    pub fn deriv_inv(&self, u: f64) -> f64 {
        debug_assert!(u >= 0.0);
        u.powf(1.0 / (self.a - 1.0))
    }

    /// Bregman divergence d_F(r | rbar) = F(r) - F(rbar) - F'(rbar)(r - rbar).
    pub fn bregman(&self, r: f64, rbar: f64) -> Result<f64> {
        if r < 0.0 || rbar < 0.0 {
            return Err(Error::Domain("bregman requires nonnegative inputs".into()));
        }
        Ok(self.value(r) - self.value(rbar) - self.deriv(rbar) * (r - rbar))
    }
}

/// Which value of the coupling term (or its partials) to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingDeriv {
    H,
    D1,
    D2,
    D11,
    D12,
    D22,
}

/// Coupling term h(r1, r2) = r1^b1 r2^b2 / (1 + r1 + r2)^gamma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub b1: f64,
    pub b2: f64,
    pub gamma: f64,
}

/// A single monomial quotient r1^b1 r2^b2 / (1+r1+r2)^g. All derivatives of
/// the coupling term are finite linear combinations of these.
fn q_term(b1: f64, b2: f64, g: f64, r1: f64, r2: f64) -> f64 {
    // 0^0 = 1, 0^positive = 0 per IEEE powf; negative exponents at 0 only
    // occur for inadmissible parameters and yield inf, surfacing the misuse.
    r1.powf(b1) * r2.powf(b2) / (1.0 + r1 + r2).powf(g)
}

impl Coupling {
    pub fn new(b1: f64, b2: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("b1", b1), ("b2", b2), ("gamma", gamma)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "coupling exponent {name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(Self { b1, b2, gamma })
    }

    /// Evaluate h or one of its partial derivatives up to second order.
    pub fn eval(&self, which: CouplingDeriv, r1: f64, r2: f64) -> Result<f64> {
        if r1 < 0.0 || r2 < 0.0 {
            return Err(Error::Domain(format!(
                "coupling arguments must be nonnegative, got ({r1}, {r2})"
            )));
        }
        let (b1, b2, g) = (self.b1, self.b2, self.gamma);
        let q = |bb1: f64, bb2: f64, gg: f64| q_term(bb1, bb2, gg, r1, r2);
        let val = match which {
            CouplingDeriv::H => q(b1, b2, g),
            CouplingDeriv::D1 => b1 * q(b1 - 1.0, b2, g) - g * q(b1, b2, g + 1.0),
            CouplingDeriv::D2 => b2 * q(b1, b2 - 1.0, g) - g * q(b1, b2, g + 1.0),
            CouplingDeriv::D11 => {
                b1 * (b1 - 1.0) * q(b1 - 2.0, b2, g) - 2.0 * g * b1 * q(b1 - 1.0, b2, g + 1.0)
                    + g * (g + 1.0) * q(b1, b2, g + 2.0)
            }
            CouplingDeriv::D22 => {
                b2 * (b2 - 1.0) * q(b1, b2 - 2.0, g) - 2.0 * g * b2 * q(b1, b2 - 1.0, g + 1.0)
                    + g * (g + 1.0) * q(b1, b2, g + 2.0)
            }
            CouplingDeriv::D12 => {
                b1 * b2 * q(b1 - 1.0, b2 - 1.0, g) - g * b1 * q(b1 - 1.0, b2, g + 1.0)
                    - g * b2 * q(b1, b2 - 1.0, g + 1.0)
                    + g * (g + 1.0) * q(b1, b2, g + 2.0)
            }
        };
        Ok(val)
    }
}

/// Attractive interaction kernel variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    /// K(z) = lambda |z|^2 / 2
    Quadratic { lambda: f64 },
    /// K(z) = lambda |z|^2 / 2 + mu (sqrt(1 + z^2) - 1)
    RegularizedQuadratic { lambda: f64, mu: f64 },
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        let (l, m) = match *self {
            Kernel::Quadratic { lambda } => (lambda, 0.0),
            Kernel::RegularizedQuadratic { lambda, mu } => (lambda, mu),
        };
        if !l.is_finite() || l <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "kernel convexity modulus must be positive, got {l}"
            )));
        }
        if !m.is_finite() || m < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "kernel perturbation weight must be nonnegative, got {m}"
            )));
        }
        Ok(())
    }

    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Kernel::Quadratic { lambda } => 0.5 * lambda * z * z,
            Kernel::RegularizedQuadratic { lambda, mu } => {
                0.5 * lambda * z * z + mu * ((1.0 + z * z).sqrt() - 1.0)
            }
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        match *self {
            Kernel::Quadratic { lambda } => lambda * z,
            Kernel::RegularizedQuadratic { lambda, mu } => {
                lambda * z + mu * z / (1.0 + z * z).sqrt()
            }
        }
    }

    /// Convexity modulus lambda.
    pub fn lambda(&self) -> f64 {
        match *self {
            Kernel::Quadratic { lambda } => lambda,
            Kernel::RegularizedQuadratic { lambda, .. } => lambda,
        }
    }

    /// Upper bound C_K on the second derivative.
    pub fn second_deriv_bound(&self) -> f64 {
        match *self {
            Kernel::Quadratic { lambda } => lambda,
            Kernel::RegularizedQuadratic { lambda, mu } => lambda + mu,
        }
    }
}

/// One admissibility condition of the example family with its slack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub pass: bool,
    /// Positive slack means the inequality holds strictly; zero is binding.
    pub slack: f64,
}

/// Result of checking the example-family admissibility conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub conditions: Vec<ConditionCheck>,
    pub admissible: bool,
}

/// Check the three admissibility conditions of the power-law example family:
/// a_j >= 2, b_j >= 2 a_j - 1, and b1 + b2 <= gamma + min(a1, a2).
pub fn validate_example_params(
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
    gamma: f64,
) -> Result<AdmissibilityReport> {
    for (name, v) in [("a1", a1), ("a2", a2), ("b1", b1), ("b2", b2), ("gamma", gamma)] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "{name} must be finite and positive, got {v}"
            )));
        }
    }
    let mut conditions = Vec::new();
    let mut push = |name: String, slack: f64| {
        conditions.push(ConditionCheck { name, pass: slack >= 0.0, slack });
    };
    push("a_j >= 2".into(), (a1 - 2.0).min(a2 - 2.0));
    push(
        "b_j >= 2*a_j - 1".into(),
        (b1 - (2.0 * a1 - 1.0)).min(b2 - (2.0 * a2 - 1.0)),
    );
    push(
        "b1 + b2 <= gamma + min(a1, a2)".into(),
        gamma + a1.min(a2) - (b1 + b2),
    );
    let admissible = conditions.iter().all(|c| c.pass);
    Ok(AdmissibilityReport { conditions, admissible })
}

/// Which theta function to evaluate; first index is the component j of the
/// coupling partial, second (when present) the differentiation direction i.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaKind {
    T1,
    T2,
    T11,
    T12,
    T21,
    T22,
}

/// Log-spaced sampling grid over (0, u_max]^2 for hypothesis audits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleSpec {
    pub u_min: f64,
    pub u_max: f64,
    pub n: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self { u_min: 1e-6, u_max: 1e4, n: 64 }
    }
}

impl SampleSpec {
    pub fn points(&self) -> Vec<f64> {
        let (lo, hi) = (self.u_min.ln(), self.u_max.ln());
        (0..self.n)
            .map(|k| (lo + (hi - lo) * k as f64 / (self.n - 1).max(1) as f64).exp())
            .collect()
    }
}

/// Full model parameterization plus empirically derived constants.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub f1: PowerNonlinearity,
    pub f2: PowerNonlinearity,
    pub coupling: Coupling,
    pub kernel: Kernel,
    pub eps: f64,
    /// Sampled suprema kappa[j][i] bounding |theta_{j,i}|.
    pub kappa: [[f64; 2]; 2],
    pub eps0_estimate: f64,
}

/// Serialized form: {a1,a2,b1,b2,gamma,eps,kernel:{type,lambda,mu}}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpecJson {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub gamma: f64,
    pub eps: f64,
    pub kernel: Kernel,
}

impl ModelSpec {
    pub fn new(
        a1: f64,
        a2: f64,
        b1: f64,
        b2: f64,
        gamma: f64,
        kernel: Kernel,
        eps: f64,
    ) -> Result<Self> {
        let report = validate_example_params(a1, a2, b1, b2, gamma)?;
        if !report.admissible {
            let failed: Vec<_> = report
                .conditions
                .iter()
                .filter(|c| !c.pass)
                .map(|c| c.name.clone())
                .collect();
            return Err(Error::InvalidParameter(format!(
                "inadmissible example parameters, failing: {}",
                failed.join("; ")
            )));
        }
        kernel.validate()?;
        if !eps.is_finite() || eps < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "coupling strength eps must be nonnegative, got {eps}"
            )));
        }
        let mut m = Self {
            f1: PowerNonlinearity::new(a1)?,
            f2: PowerNonlinearity::new(a2)?,
            coupling: Coupling::new(b1, b2, gamma)?,
            kernel,
            eps,
            kappa: [[0.0; 2]; 2],
            eps0_estimate: 0.0,
        };
        let sample = SampleSpec::default();
        m.kappa = m.estimate_kappa(&sample)?;
        m.eps0_estimate = m.estimate_eps0(&sample);
        Ok(m)
    }

    pub fn from_json(json: &ModelSpecJson) -> Result<Self> {
        Self::new(json.a1, json.a2, json.b1, json.b2, json.gamma, json.kernel, json.eps)
    }

    pub fn to_json(&self) -> ModelSpecJson {
        ModelSpecJson {
            a1: self.f1.exponent(),
            a2: self.f2.exponent(),
            b1: self.coupling.b1,
            b2: self.coupling.b2,
            gamma: self.coupling.gamma,
            eps: self.eps,
            kernel: self.kernel,
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        let mut m = self.clone();
        m.eps = eps;
        m
    }

    /// theta_j(u) = d_{r_j} h(r) and theta_{j,i}(u) = d_{r_i} d_{r_j} h(r) / F_i''(r_i)
    /// with r_k = (F_k')^{-1}(u_k); defined as 0 on the boundary of the quadrant.
    pub fn theta(&self, which: ThetaKind, u1: f64, u2: f64) -> Result<f64> {
        if u1 < 0.0 || u2 < 0.0 {
            return Err(Error::Domain(format!(
                "theta arguments must be nonnegative, got ({u1}, {u2})"
            )));
        }
        // Boundary limit forced by the flatness of h on the axes; the
        // explicit branch avoids 0/0 when dividing by F_i''.
        if u1 == 0.0 || u2 == 0.0 {
            return Ok(0.0);
        }
        let r1 = self.f1.deriv_inv(u1);
        let r2 = self.f2.deriv_inv(u2);
        let val = match which {
            ThetaKind::T1 => self.coupling.eval(CouplingDeriv::D1, r1, r2)?,
            ThetaKind::T2 => self.coupling.eval(CouplingDeriv::D2, r1, r2)?,
            ThetaKind::T11 => self.coupling.eval(CouplingDeriv::D11, r1, r2)? / self.f1.deriv2(r1),
            ThetaKind::T12 => self.coupling.eval(CouplingDeriv::D12, r1, r2)? / self.f2.deriv2(r2),
            ThetaKind::T21 => self.coupling.eval(CouplingDeriv::D12, r1, r2)? / self.f1.deriv2(r1),
            ThetaKind::T22 => self.coupling.eval(CouplingDeriv::D22, r1, r2)? / self.f2.deriv2(r2),
        };
        Ok(val)
    }

    /// Sampled suprema of |theta_{j,i}(u)| / min{1, u1, u2, sqrt(r_i / r_j)}.
    pub fn estimate_kappa(&self, sample: &SampleSpec) -> Result<[[f64; 2]; 2]> {
        if sample.n == 0 {
            return Err(Error::InvalidParameter("empty kappa sample grid".into()));
        }
        let pts = sample.points();
        let kinds = [
            [(ThetaKind::T11, 0usize, 0usize), (ThetaKind::T12, 0, 1)],
            [(ThetaKind::T21, 1, 0), (ThetaKind::T22, 1, 1)],
        ];
        let mut kappa = [[0.0f64; 2]; 2];
        for &u1 in &pts {
            for &u2 in &pts {
                let u = [u1, u2];
                let r = [self.f1.deriv_inv(u1), self.f2.deriv_inv(u2)];
                for j in 0..2 {
                    for i in 0..2 {
                        let (kind, jj, ii) = kinds[j][i];
                        let t = self.theta(kind, u1, u2)?;
                        let denom = 1.0_f64
                            .min(u[0])
                            .min(u[1])
                            .min((r[ii] / r[jj]).sqrt());
                        let ratio = t.abs() / denom;
                        if ratio > kappa[j][i] {
                            kappa[j][i] = ratio;
                        }
                    }
                }
            }
        }
        Ok(kappa)
    }

    /// Hessian of F_{2 eps}(r) = F1(r1) + F2(r2) + 2 eps h(r).
    fn f2eps_hessian(&self, eps: f64, r1: f64, r2: f64) -> Result<[[f64; 2]; 2]> {
        let d11 = self.coupling.eval(CouplingDeriv::D11, r1, r2)?;
        let d12 = self.coupling.eval(CouplingDeriv::D12, r1, r2)?;
        let d22 = self.coupling.eval(CouplingDeriv::D22, r1, r2)?;
        Ok([
            [self.f1.deriv2(r1) + 2.0 * eps * d11, 2.0 * eps * d12],
            [2.0 * eps * d12, self.f2.deriv2(r2) + 2.0 * eps * d22],
        ])
    }

    fn f2eps_psd_everywhere(&self, eps: f64, r_pts: &[f64]) -> bool {
        for &r1 in r_pts {
            for &r2 in r_pts {
                let h = match self.f2eps_hessian(eps, r1, r2) {
                    Ok(h) => h,
                    Err(_) => return false,
                };
                let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
                if h[0][0] < -1e-14 || h[1][1] < -1e-14 || det < -1e-12 {
                    return false;
                }
            }
        }
        true
    }

    /// Largest eps (bisection) with a sampled-PSD Hessian of F_{2 eps}.
    pub fn estimate_eps0(&self, sample: &SampleSpec) -> f64 {
        let r_pts: Vec<f64> = sample
            .points()
            .iter()
            .map(|&u| self.f1.deriv_inv(u).max(self.f2.deriv_inv(u)))
            .collect();
        let cap = 1e6;
        let mut hi = 1e-3;
        while hi < cap && self.f2eps_psd_everywhere(hi, &r_pts) {
            hi *= 2.0;
        }
        if hi >= cap {
            return cap;
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.f2eps_psd_everywhere(mid, &r_pts) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Gamma_eps(u) = u + eps (theta_1(u), theta_2(u)).
    pub fn gamma_map(&self, u1: f64, u2: f64) -> Result<[f64; 2]> {
        let t1 = self.theta(ThetaKind::T1, u1, u2)?;
        let t2 = self.theta(ThetaKind::T2, u1, u2)?;
        Ok([u1 + self.eps * t1, u2 + self.eps * t2])
    }

    /// Lower bound on det D Gamma_eps from the sampled kappa matrix.
    pub fn gamma_jacobian_det_bound(&self) -> f64 {
        let k = &self.kappa;
        1.0 - self.eps * (k[0][0] + k[1][1])
            - self.eps * self.eps * (k[0][0] * k[1][1] + k[0][1] * k[1][0])
    }

    /// Invert Gamma_eps by damped Newton iteration; identity on the boundary.
    pub fn gamma_inverse(&self, v1: f64, v2: f64, tol: f64) -> Result<[f64; 2]> {
        if v1 < 0.0 || v2 < 0.0 {
            return Err(Error::Domain(format!(
                "gamma_inverse arguments must be nonnegative, got ({v1}, {v2})"
            )));
        }
        if self.gamma_jacobian_det_bound() <= 0.1 {
            return Err(Error::Config(format!(
                "eps = {} too large: Jacobian determinant bound {} <= 0.1",
                self.eps,
                self.gamma_jacobian_det_bound()
            )));
        }
        // Gamma_eps is the identity on the axes.
        if self.eps == 0.0 || v1 == 0.0 || v2 == 0.0 {
            return Ok([v1, v2]);
        }
        let max_iters = 50;
        let mut u = [v1, v2];
        let mut last_res = f64::INFINITY;
        for _ in 0..max_iters {
            let g = self.gamma_map(u[0], u[1])?;
            let res = [g[0] - v1, g[1] - v2];
            last_res = res[0].abs().max(res[1].abs());
            if last_res <= tol {
                return Ok(u);
            }
            let j11 = 1.0 + self.eps * self.theta(ThetaKind::T11, u[0], u[1])?;
            let j12 = self.eps * self.theta(ThetaKind::T12, u[0], u[1])?;
            let j21 = self.eps * self.theta(ThetaKind::T21, u[0], u[1])?;
            let j22 = 1.0 + self.eps * self.theta(ThetaKind::T22, u[0], u[1])?;
            let det = j11 * j22 - j12 * j21;
            if det.abs() < 1e-14 {
                break;
            }
            u[0] -= (j22 * res[0] - j12 * res[1]) / det;
            u[1] -= (-j21 * res[0] + j11 * res[1]) / det;
            u[0] = u[0].max(0.0);
            u[1] = u[1].max(0.0);
        }
        Err(Error::Numeric(format!(
            "gamma_inverse did not converge in {max_iters} iterations, last residual {last_res:e}"
        )))
    }
}

/// One named check of the numeric hypothesis audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub pass: bool,
    pub worst: f64,
}

/// Result of the sampled hypothesis audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
    pub eps0_estimate: f64,
    pub beta_h_estimate: f64,
    pub kappa: [[f64; 2]; 2],
    pub all_pass: bool,
}

impl ModelSpec {
    /// Sampled audit of the structural hypotheses: PSD Hessian of F_{2 eps},
    /// the McCann condition, the energy-density sandwich and the
    /// Bregman-controlled theta increments.
    pub fn hypothesis_numeric_audit(&self, grid: &SampleSpec) -> Result<AuditReport> {
        let u_pts = grid.points();
        let r_pts: Vec<f64> = u_pts
            .iter()
            .map(|&u| self.f1.deriv_inv(u).max(self.f2.deriv_inv(u)))
            .collect();
        let mut checks = Vec::new();

        // (i) PSD Hessian of F_{2 eps} at the configured eps.
        let psd = self.f2eps_psd_everywhere(self.eps, &r_pts);
        checks.push(AuditCheck {
            name: "hessian_f2eps_psd".into(),
            pass: psd,
            worst: if psd { 0.0 } else { 1.0 },
        });

        // (ii) McCann condition F - r F' + r^2 F'' >= 0.
        let mut mccann_min = f64::INFINITY;
        for f in [&self.f1, &self.f2] {
            for &r in &r_pts {
                let v = f.value(r) - r * f.deriv(r) + r * r * f.deriv2(r);
                mccann_min = mccann_min.min(v);
            }
        }
        checks.push(AuditCheck {
            name: "mccann_condition".into(),
            pass: mccann_min >= -1e-12,
            worst: mccann_min,
        });

        // (iii) Sandwich (F1+F2)/2 <= F_eps <= (1+eps k11/2) F1 + (1+eps k22/2) F2.
        let mut sandwich_worst: f64 = 0.0;
        for &r1 in &r_pts {
            for &r2 in &r_pts {
                let f1 = self.f1.value(r1);
                let f2 = self.f2.value(r2);
                let feps = f1 + f2 + self.eps * self.coupling.eval(CouplingDeriv::H, r1, r2)?;
                let lower = 0.5 * (f1 + f2);
                let upper = (1.0 + 0.5 * self.eps * self.kappa[0][0]) * f1
                    + (1.0 + 0.5 * self.eps * self.kappa[1][1]) * f2;
                let scale = 1.0 + feps.abs();
                sandwich_worst = sandwich_worst
                    .max((lower - feps) / scale)
                    .max((feps - upper) / scale);
            }
        }
        checks.push(AuditCheck {
            name: "energy_density_sandwich".into(),
            pass: sandwich_worst <= 1e-10,
            worst: sandwich_worst,
        });

        // (iv) Fitted beta_H for the Bregman-controlled theta increments,
        // max{r1,r2} |theta_ji(u) - theta_ji(ubar)|^2 <= beta_H (d_F1 + d_F2),
        // with the reference point bounded by H.
        let h_bound = 2.0;
        let coarse: Vec<f64> = r_pts.iter().copied().filter(|&r| r <= 1e3).collect();
        let refs: Vec<f64> = (0..9).map(|k| h_bound * k as f64 / 8.0).collect();
        let mut beta_h: f64 = 0.0;
        let kinds = [ThetaKind::T11, ThetaKind::T12, ThetaKind::T21, ThetaKind::T22];
        for &r1 in &coarse {
            for &r2 in &coarse {
                let u = [self.f1.deriv(r1), self.f2.deriv(r2)];
                for &rb1 in &refs {
                    for &rb2 in &refs {
                        let ub = [self.f1.deriv(rb1), self.f2.deriv(rb2)];
                        let denom = self.f1.bregman(r1, rb1)? + self.f2.bregman(r2, rb2)?;
                        if denom <= 1e-300 {
                            continue;
                        }
                        for kind in kinds {
                            let dt = self.theta(kind, u[0], u[1])?
                                - self.theta(kind, ub[0], ub[1])?;
                            let ratio = r1.max(r2) * dt * dt / denom;
                            beta_h = beta_h.max(ratio);
                        }
                    }
                }
            }
        }
        checks.push(AuditCheck {
            name: "theta_bregman_bound_finite".into(),
            pass: beta_h.is_finite(),
            worst: beta_h,
        });

        let eps0 = self.estimate_eps0(grid);
        let all_pass = checks.iter().all(|c| c.pass);
        Ok(AuditReport {
            checks,
            eps0_estimate: eps0,
            beta_h_estimate: beta_h,
            kappa: self.kappa,
            all_pass,
        })
    }
}
