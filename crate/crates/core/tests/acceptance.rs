//! End-to-end acceptance suite. Each test prints one pass/fail line for its
//! criterion; run with `cargo test --test acceptance -- --nocapture` to see
//! the report even for passing checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossdiff::baselines;
use crossdiff::flow::{run_flow, FlowConfig};
use crossdiff::grid::{
    l1_distance, random_x0_pair, uniform_density, w2_pair_distance, DensityPair, Grid1D,
    QuantilePair,
};
use crossdiff::jko::{
    default_zeta_set, jko_run, jko_step, quantile_energy, weak_residual, JkoConfig, OptConfig,
};
use crossdiff::lyapunov::{
    canonical_pair_family, ck_check, decay_fit, l_convexity_floor, lyapunov_decomposition,
    n_vs_l_check, slope_domination_probe,
};
use crossdiff::model::{validate_example_params, Kernel, ModelSpec};
use crossdiff::steady::{
    quadratic_c_tilde, solve_steady_general_from, solve_steady_quadratic, SteadyState,
};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("[{}] {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

fn model(eps: f64) -> ModelSpec {
    ModelSpec::new(2.0, 2.0, 3.0, 3.0, 4.0, Kernel::Quadratic { lambda: 1.0 }, eps).unwrap()
}

fn grid() -> Grid1D {
    Grid1D::new(4.0, 512).unwrap()
}

fn uniform_pair(g: &Grid1D) -> DensityPair {
    let rho = uniform_density(g, -0.5, 0.5).unwrap();
    DensityPair::new(*g, rho.clone(), rho).unwrap()
}

#[test]
fn criterion_01_admissibility_gate() {
    // (a1, a2, b1, b2, gamma); expected admissibility from the raw
    // inequalities a_j >= 2, b_j >= 2 a_j - 1, b1 + b2 <= gamma + min a_j.
    let tuples: [(f64, f64, f64, f64, f64); 20] = [
        (2.0, 2.0, 3.0, 3.0, 4.0),
        (2.0, 2.0, 3.0, 3.0, 3.9),
        (2.0, 2.0, 3.0, 3.0, 10.0),
        (2.0, 3.0, 3.0, 5.0, 6.0),
        (2.0, 3.0, 3.0, 5.0, 5.9),
        (1.9, 2.0, 3.0, 3.0, 4.0),
        (2.0, 1.9, 3.0, 3.0, 4.0),
        (3.0, 3.0, 5.0, 5.0, 7.0),
        (3.0, 3.0, 5.0, 5.0, 6.9),
        (3.0, 3.0, 4.9, 5.0, 7.0),
        (2.0, 2.0, 2.9, 3.0, 4.0),
        (2.0, 2.0, 3.0, 2.9, 4.0),
        (2.5, 2.0, 4.0, 3.0, 5.0),
        (2.5, 2.0, 3.9, 3.0, 5.0),
        (2.0, 2.0, 4.0, 4.0, 6.0),
        (2.0, 2.0, 4.0, 4.0, 5.9),
        (4.0, 2.0, 7.0, 3.0, 8.0),
        (4.0, 2.0, 7.0, 3.0, 7.9),
        (2.0, 2.0, 10.0, 10.0, 18.0),
        (2.0, 2.0, 10.0, 10.0, 17.9),
    ];
    let mut mismatches = Vec::new();
    for &(a1, a2, b1, b2, g) in &tuples {
        let expected = a1 >= 2.0
            && a2 >= 2.0
            && b1 >= 2.0 * a1 - 1.0
            && b2 >= 2.0 * a2 - 1.0
            && b1 + b2 <= g + a1.min(a2);
        let got = validate_example_params(a1, a2, b1, b2, g).unwrap().admissible;
        if got != expected {
            mismatches.push((a1, a2, b1, b2, g));
        }
    }
    report(
        "criterion 1 (admissibility gate)",
        mismatches.is_empty(),
        &format!("20 tuples classified, mismatches: {mismatches:?}"),
    );
}

#[test]
fn criterion_02_barenblatt_oracle() {
    let g = grid();
    let m = model(0.0);
    let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
    let (ct1, _) = quadratic_c_tilde(&s, &m);
    let c_exact = 0.5 * (1.5f64).powf(2.0 / 3.0);
    let r_exact = (2.0 * c_exact).sqrt();
    let m2_exact = 2.0 * c_exact / 5.0;
    let sum = s.summary(&m, Some(quadratic_c_tilde(&s, &m)));
    let e_c = (ct1 - c_exact).abs() / c_exact;
    let e_r = (sum.support1 - r_exact).abs() / r_exact;
    let e_m2 = (sum.m2_1 - m2_exact).abs() / m2_exact;
    report(
        "criterion 2 (Barenblatt oracle)",
        e_c <= 1e-3 && e_r <= 1e-3 && e_m2 <= 1e-3,
        &format!("rel errors: C {e_c:.2e}, radius {e_r:.2e}, m2 {e_m2:.2e}"),
    );
}

#[test]
fn criterion_03_gamma_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let eps = rng.gen_range(0.0..=0.2);
        let m = model(0.0).with_eps(eps);
        let v1 = rng.gen_range(0.0..10.0);
        let v2 = rng.gen_range(0.0..10.0);
        let u = m.gamma_inverse(v1, v2, 1e-13).unwrap();
        let v = m.gamma_map(u[0], u[1]).unwrap();
        worst = worst.max((v[0] - v1).abs()).max((v[1] - v2).abs());
    }
    report(
        "criterion 3 (Gamma round trip)",
        worst <= 1e-10,
        &format!("1000 points, max round-trip error {worst:.2e}"),
    );
}

#[test]
fn criterion_04_step_inequality() {
    let g = grid();
    let m = model(0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = JkoConfig {
        tau: 1e-2,
        m: 256,
        opt: OptConfig { tol: 1e-8, max_iters: 400, ..Default::default() },
    };
    let random_monotone = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut x: Vec<f64> = (0..cfg.m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        x
    };
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let xhat =
            QuantilePair::new(random_monotone(&mut rng), random_monotone(&mut rng)).unwrap();
        let x = jko_step(&xhat, &m, &cfg, &g).unwrap();
        let dm = 1.0 / cfg.m as f64;
        let dsq: f64 = x
            .x1
            .iter()
            .zip(&xhat.x1)
            .chain(x.x2.iter().zip(&xhat.x2))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            * dm;
        let lhs = dsq / (2.0 * cfg.tau);
        let drop = quantile_energy(&xhat, &m, &g).unwrap() - quantile_energy(&x, &m, &g).unwrap();
        worst = worst.max(lhs - drop);
    }
    report(
        "criterion 4 (JKO step inequality)",
        worst <= 1e-6,
        &format!("50 steps at m = 256, worst d^2/2tau - dE = {worst:.2e}"),
    );
}

#[test]
fn criterion_05_weak_residual_bound() {
    let g = grid();
    let m = model(0.05);
    let cfg = JkoConfig { tau: 1e-2, m: 256, ..Default::default() };
    let zetas = default_zeta_set(&g).unwrap();
    assert_eq!(zetas.len(), 6);
    let mut prev = uniform_pair(&g).recenter().unwrap();
    let mut worst_ratio = 0.0f64;
    for _ in 0..10 {
        let x = QuantilePair::from_pair(&prev, cfg.m).unwrap();
        let next = jko_step(&x, &m, &cfg, &g).unwrap().to_pair(&g).unwrap();
        let (r1, r2, bound) = weak_residual(&prev, &next, &m, cfg.tau, &zetas).unwrap();
        worst_ratio = worst_ratio.max((r1 + r2) / bound);
        prev = next;
    }
    report(
        "criterion 5 (weak-residual bound)",
        worst_ratio <= 1.05,
        &format!("10 steps, 6 test functions, worst (R1+R2)/bound = {worst_ratio:.4}"),
    );
}

#[test]
fn criterion_06_cross_integrator_agreement() {
    let g = grid();
    let m = model(0.05);
    let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
    let init = uniform_pair(&g).recenter().unwrap();
    let t_final = 0.5;

    let fv_cfg = FlowConfig { t_final, ..Default::default() };
    let (_, fv_final) = run_flow(&init, &m, &s, &fv_cfg).unwrap();

    let jko_cfg = JkoConfig { tau: 1e-3, m: 256, ..Default::default() };
    let nsteps = (t_final / jko_cfg.tau).round() as usize;
    let (_, jko_final) = jko_run(&init, &m, &jko_cfg, nsteps, &s).unwrap();

    let gap = w2_pair_distance(&fv_final, &jko_final, 256).unwrap();
    report(
        "criterion 6 (cross-integrator agreement)",
        gap <= 0.05,
        &format!("W2 endpoint gap at T = 0.5: {gap:.4}"),
    );
}

#[test]
fn criterion_07_decomposition_identity() {
    let g = grid();
    let m = model(0.05);
    let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_x0_pair(&g, &mut rng).unwrap();
        let rep = lyapunov_decomposition(&p, &m, &s).unwrap();
        worst = worst.max(rep.identity_residual / (1.0 + rep.l_gap.abs()));
    }
    report(
        "criterion 7 (decomposition identity)",
        worst <= 1e-8,
        &format!("100 pairs, worst residual ratio {worst:.2e}"),
    );
}

#[test]
fn criterion_08_convexity_floor() {
    let g = grid();
    let m = model(0.05);
    let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut min_slack = f64::INFINITY;
    for _ in 0..100 {
        let p = random_x0_pair(&g, &mut rng).unwrap();
        let (gap, floor) = l_convexity_floor(&p, &m, &s, 256).unwrap();
        min_slack = min_slack.min(gap - floor);
    }
    report(
        "criterion 8 (lambda_eps convexity floor)",
        min_slack >= -1e-6,
        &format!("100 pairs, min gap - floor = {min_slack:.2e}"),
    );
}

#[test]
fn criterion_09_decay_rate_unperturbed() {
    let g = grid();
    let m = model(0.0);
    let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
    let init = uniform_pair(&g).recenter().unwrap();
    let cfg = FlowConfig { t_final: 6.0, ..Default::default() };
    let (trace, _) = run_flow(&init, &m, &s, &cfg).unwrap();
    let fit = decay_fit(&trace, (1.0, 5.0)).unwrap();
    // The decay bound is one-sided (rate >= 2 lambda up to fit tolerance);
    // the observed symmetric datum relaxes through a faster dilation mode.
    // Consistency of the L1 and energy rates (CK) is checked alongside.
    let ck_consistent = (2.0 * fit.rate_l1 - fit.rate_e).abs() <= 0.25 * fit.rate_e;
    report(
        "criterion 9 (decay rate, unperturbed)",
        fit.rate_e >= 1.8 && fit.r2_fit > 0.99 && ck_consistent,
        &format!(
            "rate_E = {:.3} (theory >= 2), rate_L1 = {:.3}, r2 = {:.5}",
            fit.rate_e, fit.rate_l1, fit.r2_fit
        ),
    );
}

#[test]
fn criterion_10_decay_degradation_linear() {
    let g = grid();
    let base = model(0.0);
    let eps_list = [0.0, 0.02, 0.05, 0.1];
    let mut rates = Vec::new();
    for &eps in &eps_list {
        let m = base.with_eps(eps);
        let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
        let init = uniform_pair(&g).recenter().unwrap();
        let cfg = FlowConfig { t_final: 6.0, ..Default::default() };
        let (trace, _) = run_flow(&init, &m, &s, &cfg).unwrap();
        let fit = decay_fit(&trace, (1.0, 5.0)).unwrap();
        rates.push((eps, fit.rate_e, fit.rate_l1));
    }
    let rate0 = rates[0].1;
    let c0 = rates
        .iter()
        .skip(1)
        .map(|&(e, r, _)| ((rate0 - r) / e).max(0.0))
        .fold(0.0f64, f64::max);
    let nonincreasing = rates.windows(2).all(|w| w[1].1 <= w[0].1 + 0.05);
    let linear = rates.iter().all(|&(e, r, _)| 2.0 - r <= c0 * e + 0.1);
    let l1_ok = rates.iter().all(|&(_, _, rl)| rl > 0.0);
    report(
        "criterion 10 (decay degradation linear)",
        nonincreasing && linear && l1_ok,
        &format!("rates {rates:?}, fitted C0 = {c0:.3}"),
    );
}

#[test]
fn criterion_11_uniqueness_symmetry() {
    let g = grid();
    let m = model(0.05);
    let tol = 1e-10;
    let inits: [Vec<f64>; 3] = [
        uniform_density(&g, -0.5, 0.5).unwrap(),
        uniform_density(&g, -1.5, 1.5).unwrap(),
        {
            let mut v = uniform_density(&g, -1.0, 0.2).unwrap();
            let w = uniform_density(&g, -0.2, 1.0).unwrap();
            for (a, b) in v.iter_mut().zip(&w) {
                *a = 0.5 * (*a + b);
            }
            v
        },
    ];
    let mut states: Vec<SteadyState> = Vec::new();
    for init in &inits {
        states.push(
            solve_steady_general_from(&m, &g, tol, 0.5, init, init).unwrap(),
        );
    }
    let mut max_l1 = 0.0f64;
    for i in 0..states.len() {
        for j in (i + 1)..states.len() {
            max_l1 = max_l1
                .max(l1_distance(&states[i].pair.rho1, &states[j].pair.rho1, &g))
                .max(l1_distance(&states[i].pair.rho2, &states[j].pair.rho2, &g));
        }
    }
    let mut asym = 0.0f64;
    for s in &states {
        for rho in [&s.pair.rho1, &s.pair.rho2] {
            for i in 0..g.n {
                asym = asym.max((rho[i] - rho[g.n - 1 - i]).abs());
            }
        }
    }
    report(
        "criterion 11 (uniqueness and symmetry)",
        max_l1 <= 2.0 * 1e-6 && asym <= 1e-8,
        &format!("3 initializations, max pairwise L1 {max_l1:.2e}, max asymmetry {asym:.2e}"),
    );
}

#[test]
fn criterion_12_conservation_suite() {
    let g = grid();
    let m = model(0.05);
    let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
    let shift = 0.25;
    let rho1 = crossdiff::grid::shift_density(&s.pair.rho1, &g, -shift);
    let rho2 = crossdiff::grid::shift_density(&s.pair.rho2, &g, shift);
    let anti = DensityPair::new_unchecked(g, rho1, rho2).unwrap();
    let mut worst_mass = 0.0f64;
    let mut worst_com = 0.0f64;
    let mut worst_rise = f64::NEG_INFINITY;
    for init in [uniform_pair(&g).recenter().unwrap(), anti] {
        let cfg = FlowConfig { t_final: 1.0, snapshot_every: 1, ..Default::default() };
        let (trace, _) = run_flow(&init, &m, &s, &cfg).unwrap();
        let m0_1 = trace.mass1[0];
        let m0_2 = trace.mass2[0];
        // Per-step drift: snapshots are every step here.
        for w in trace.mass1.windows(2) {
            worst_mass = worst_mass.max((w[1] - w[0]).abs());
        }
        for w in trace.mass2.windows(2) {
            worst_mass = worst_mass.max((w[1] - w[0]).abs());
        }
        let com0 = trace.m1_comb[0];
        for &c in &trace.m1_comb {
            worst_com = worst_com.max((c - com0).abs());
        }
        for w in trace.e_eps.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
        let _ = (m0_1, m0_2);
    }
    report(
        "criterion 12 (conservation suite)",
        worst_mass <= 1e-12 && worst_com <= 10.0 * g.dx() && worst_rise <= 1e-9,
        &format!(
            "per-step mass drift {worst_mass:.2e}, COM drift {worst_com:.2e} (10 dx = {:.2e}), worst energy rise {worst_rise:.2e}",
            10.0 * g.dx()
        ),
    );
}

#[test]
fn criterion_13_regression_baselines() {
    let g = grid();
    let m = model(0.05);
    let s = solve_steady_quadratic(&m, &g, 1e-11).unwrap();
    let kappa_max = m.kappa.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let kappa_base = baselines::KAPPA.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let mut failures = Vec::new();
    // Deterministic estimates first.
    for (name, value, base) in [
        ("kappa", kappa_max, kappa_base),
        ("eps0", m.eps0_estimate, baselines::EPS0),
        ("K0", s.k0_estimate, baselines::K0),
    ] {
        if baselines::rel_dev(value, base) > baselines::REL_TOL {
            failures.push(format!("{name}: {value:.4e} vs {base:.4e}"));
        }
    }
    // Sampled suprema across two seeds.
    for seed in [17u64, 4242] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_ck = 0.0f64;
        let mut c_n = 0.0f64;
        let mut c_hat = 0.0f64;
        for p in canonical_pair_family(&s, &mut rng, 20).unwrap() {
            c_ck = c_ck.max(ck_check(&p, &s, &m).unwrap());
            c_n = c_n.max(n_vs_l_check(&p, &m, &s).unwrap());
            let (lhs, rhs) = slope_domination_probe(&p, &m, &s).unwrap();
            if rhs > 1e-10 {
                c_hat = c_hat.max(lhs / rhs);
            }
        }
        for (name, value, base) in [
            ("C_CK", c_ck, baselines::C_CK),
            ("C_N", c_n, baselines::C_N),
            ("C_hat", c_hat, baselines::C_HAT),
        ] {
            if baselines::rel_dev(value, base) > baselines::REL_TOL {
                failures.push(format!("seed {seed} {name}: {value:.4e} vs {base:.4e}"));
            }
        }
    }
    report(
        "criterion 13 (regression baselines)",
        failures.is_empty(),
        &format!("2 seeds x 6 constants within 20%; failures: {failures:?}"),
    );
}
