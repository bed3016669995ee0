use mcs_core::annuity::constant_annuity;
use mcs_core::pde::{annuity_certain_surface, Grid2D};
use mcs_core::sim::{exhaustion_check, martingale_test, simulate, vol_check, PathBundle, Scheme, SimConfig};
use mcs_core::*;

fn black_scholes(r: f64, sigma: f64, lambda: f64, horizon: f64) -> Market {
    Market::Deterministic(DeterministicMarket::single_asset(
        horizon,
        RateCurve::constant(r),
        sigma,
        lambda,
    ))
}

fn mcs_rule(pi: f64) -> ConsumptionRule {
    ConsumptionRule::McsDeterministic {
        pi: vec![RateCurve::constant(pi)],
    }
}

fn vasicek(sigma_r: f64) -> VasicekMarket {
    VasicekMarket {
        kappa: 0.5,
        theta: 0.03,
        sigma_r,
        r0: 0.03,
        lambda1: 0.1,
        lambda2: 0.3,
        sigma11: RateVolFn::VasicekBond { maturity: 30.0 },
        sigma21: RateVolFn::Constant { value: 0.0 },
        sigma22: 0.18,
        horizon: 20.0,
    }
}

fn bits(b: &PathBundle) -> Vec<u64> {
    b.points
        .iter()
        .flat_map(|p| [p.x, p.c, p.r, p.w1, p.qv])
        .chain(b.x_last.iter().copied())
        .chain(b.budget.iter().copied())
        .map(f64::to_bits)
        .collect()
}

#[test]
fn money_market_consumption_is_constant() {
    let market = Market::Deterministic(DeterministicMarket::money_market(20.0, RateCurve::constant(0.03)));
    let pi = InvestmentStrategy::constant(&[]);
    let rule = ConsumptionRule::McsDeterministic { pi: vec![] };
    let cfg = SimConfig {
        steps: 2000,
        paths: 8,
        ..Default::default()
    };
    let b = simulate(&market, &pi, &rule, &cfg).unwrap();
    let expected = 1.0 / constant_annuity(0.03, 20.0);
    assert!((b.c0 - expected).abs() < 1e-12);
    for p in &b.points {
        assert!((p.c - expected).abs() <= 1e-9 * expected);
    }
}

#[test]
fn linear_drain_without_coefficients() {
    let market = Market::Deterministic(DeterministicMarket::money_market(10.0, RateCurve::constant(0.0)));
    let rule = ConsumptionRule::AnnuityCurve {
        curve: RateCurve::constant(0.0),
    };
    let cfg = SimConfig {
        steps: 100,
        paths: 4,
        report_times: vec![0.0, 2.5, 5.0, 9.9, 10.0],
        ..Default::default()
    };
    let b = simulate(&market, &InvestmentStrategy::constant(&[]), &rule, &cfg).unwrap();
    for (j, rep) in b.reports.iter().enumerate() {
        let p = b.point(0, j);
        assert!((p.x - (1.0 - rep.t / 10.0)).abs() < 1e-13, "X at {}", rep.t);
        assert!((p.c - 0.1).abs() < 1e-13);
    }
    let ex = exhaustion_check(&b);
    assert!((ex.max_ratio - 0.1 / 10.0).abs() < 1e-14);
    assert_eq!(ex.terminal_max, 0.0);
    let report = martingale_test(&b);
    assert!(report.rows.iter().all(|r| r.z == 0.0));
}

#[test]
fn log_consumption_variance_matches_lognormal_oracle() {
    // ln c(t) − ln c(0) ~ N(−v²t/2, v²t) with v = πσ = 0.12
    let horizon = 10.0;
    let cfg = SimConfig {
        steps: 100,
        paths: 100_000,
        antithetic: false,
        report_times: vec![5.0],
        master_seed: 3,
        ..Default::default()
    };
    let b = simulate(
        &black_scholes(0.02, 0.2, 0.25, horizon),
        &InvestmentStrategy::constant(&[0.6]),
        &mcs_rule(0.6),
        &cfg,
    )
    .unwrap();
    let n = b.paths() as f64;
    let logs: Vec<f64> = b.column(0).map(|p| (p.c / b.c0).ln()).collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let v2 = 0.12f64 * 0.12 * 5.0;
    assert!((mean + 0.5 * v2).abs() < 3.0 * (v2 / n).sqrt(), "mean {mean}");
    assert!((var - v2).abs() < 3.0 * v2 * (2.0 / n).sqrt(), "var {var} vs {v2}");
}

#[test]
fn trivial_market_gives_zero_z() {
    let market = Market::Deterministic(DeterministicMarket::money_market(5.0, RateCurve::constant(0.0)));
    let rule = ConsumptionRule::AnnuityCurve {
        curve: RateCurve::constant(0.0),
    };
    let cfg = SimConfig {
        steps: 50,
        paths: 2000,
        ..Default::default()
    };
    let b = simulate(&market, &InvestmentStrategy::constant(&[]), &rule, &cfg).unwrap();
    let rep = martingale_test(&b);
    assert!(rep.rows.iter().all(|r| r.z == 0.0));
    assert_eq!(rep.max_abs_z(), 0.0);
}

#[test]
fn merton_with_beta_equal_r_is_a_detected_submartingale() {
    // γ = 1, β ≡ r, λ = 0.3: consumption drift λ² = 0.09
    let horizon = 10.0;
    let market = black_scholes(0.02, 0.2, 0.3, horizon);
    let prefs = CrraPreferences {
        gamma: 1.0,
        beta: RateCurve::constant(0.02),
    };
    let Market::Deterministic(dm) = &market else {
        unreachable!()
    };
    let (drift, _) = merton_consumption_drift_vol(&prefs, dm, 0.0).unwrap();
    assert!((drift - 0.09).abs() < 1e-12);
    let pi_star = merton_policy(dm, &prefs, 0.0).unwrap().pi_star.unwrap();
    let cfg = SimConfig {
        steps: 200,
        paths: 100_000,
        master_seed: 5,
        ..Default::default()
    };
    let b = simulate(
        &market,
        &InvestmentStrategy::constant(&[pi_star]),
        &ConsumptionRule::Merton { prefs },
        &cfg,
    )
    .unwrap();
    let rep = martingale_test(&b);
    let half = rep.row_near(horizon / 2.0).unwrap();
    assert!(half.z > 3.0, "z = {}", half.z);
    assert!((rep.realized_drift - 0.09).abs() < 0.01, "drift {}", rep.realized_drift);
}

#[test]
fn exhaustion_halves_with_step_doubling() {
    let market = black_scholes(0.02, 0.2, 0.25, 20.0);
    let pi = InvestmentStrategy::constant(&[0.6]);
    let run = |steps: usize, pi_val: f64| {
        let cfg = SimConfig {
            steps,
            paths: 1000,
            master_seed: 9,
            ..Default::default()
        };
        let pi = if pi_val == 0.0 {
            InvestmentStrategy::constant(&[0.0])
        } else {
            pi.clone()
        };
        exhaustion_check(&simulate(&market, &pi, &mcs_rule(pi_val), &cfg).unwrap())
    };
    // without noise the statistic is B_r(T−Δ)/B_r(0), first order up to O(rΔ)
    let (a, b) = (run(1000, 0.0), run(2000, 0.0));
    let tail = |d: f64| (1.0 - (-0.02 * d).exp()) / 0.02;
    assert!((a.max_ratio / b.max_ratio - tail(0.02) / tail(0.01)).abs() < 1e-9);
    assert!(a.max_ratio <= a.bound);
    let (a, b) = (run(1000, 0.6), run(2000, 0.6));
    let ratio = a.mean_ratio / b.mean_ratio;
    assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    assert_eq!(a.terminal_max, 0.0);
    assert!(a.budget_max_error < 1e-3);
}

#[test]
fn schemes_agree_on_mean_consumption() {
    let market = black_scholes(0.02, 0.2, 0.25, 20.0);
    let pi = InvestmentStrategy::constant(&[0.6]);
    let run = |scheme| {
        let cfg = SimConfig {
            steps: 10_000,
            paths: 100_000,
            master_seed: 21,
            scheme,
            report_times: vec![10.0],
            ..Default::default()
        };
        martingale_test(&simulate(&market, &pi, &mcs_rule(0.6), &cfg).unwrap()).rows[0].clone()
    };
    let exact = run(Scheme::ExactLognormal);
    let euler = run(Scheme::Euler);
    let joint = (exact.se.powi(2) + euler.se.powi(2)).sqrt();
    assert!(
        (exact.mean_c - euler.mean_c).abs() <= 3.0 * joint,
        "{} vs {} (joint se {joint})",
        exact.mean_c,
        euler.mean_c
    );
}

#[test]
fn paths_stay_positive_and_seeds_reproduce() {
    let market = black_scholes(0.01, 0.3, 0.4, 15.0);
    let pi = InvestmentStrategy::constant(&[1.5]);
    let cfg = SimConfig {
        steps: 300,
        paths: 3001,
        batch_size: 256,
        master_seed: 77,
        ..Default::default()
    };
    let a = simulate(&market, &pi, &mcs_rule(1.5), &cfg).unwrap();
    let b = simulate(&market, &pi, &mcs_rule(1.5), &cfg).unwrap();
    assert_eq!(bits(&a), bits(&b));
    for (j, rep) in a.reports.iter().enumerate() {
        for p in a.column(j) {
            assert!(p.c > 0.0);
            if rep.index < cfg.steps {
                assert!(p.x > 0.0);
            }
        }
    }
    let other = simulate(&market, &pi, &mcs_rule(1.5), &SimConfig { master_seed: 78, ..cfg }).unwrap();
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn replayed_noise_reconstructs_the_brownian_path() {
    let cfg = SimConfig {
        steps: 64,
        paths: 10,
        batch_size: 4,
        master_seed: 1,
        report_times: vec![2.0],
        ..Default::default()
    };
    let b = simulate(
        &black_scholes(0.02, 0.2, 0.25, 4.0),
        &InvestmentStrategy::constant(&[0.6]),
        &mcs_rule(0.6),
        &cfg,
    )
    .unwrap();
    let sd = b.dt().sqrt();
    for path in [0, 1, 5, 9] {
        let z = b.replay_noise(path).unwrap();
        let w: f64 = z[..32].iter().map(|z| z * sd).sum();
        assert!((w - b.point(path, 0).w1).abs() < 1e-12);
    }
    let (z0, z1) = (b.replay_noise(0).unwrap(), b.replay_noise(1).unwrap());
    assert!(z0.iter().zip(&z1).all(|(a, b)| *a == -*b));
}

#[test]
fn merton_and_mcs_coincide_pathwise_at_martingale_beta() {
    let market = black_scholes(0.02, 0.2, 0.25, 20.0);
    let Market::Deterministic(dm) = &market else {
        unreachable!()
    };
    let gamma = 2.0;
    let prefs = CrraPreferences {
        gamma,
        beta: martingale_beta_curve(dm, gamma).unwrap(),
    };
    let pi_star = 0.25 / (0.2 * gamma);
    let pi = InvestmentStrategy::constant(&[pi_star]);
    let cfg = SimConfig {
        steps: 500,
        paths: 2000,
        ..Default::default()
    };
    let merton = simulate(&market, &pi, &ConsumptionRule::Merton { prefs }, &cfg).unwrap();
    let mcs = simulate(&market, &pi, &mcs_rule(pi_star), &cfg).unwrap();
    for (a, b) in merton.points.iter().zip(&mcs.points) {
        assert!(((a.c - b.c) / b.c).abs() <= 1e-10);
    }
}

#[test]
fn annuity_hedge_has_no_consumption_volatility() {
    let m = VasicekMarket {
        lambda2: 0.0,
        ..vasicek(0.01)
    };
    let grid = Grid2D::around(&m, 401, 201).unwrap();
    let abar = annuity_certain_surface(&m, &grid).unwrap();
    let pi = hedge_strategy(&m, &abar).unwrap();
    let cfg = SimConfig {
        steps: 2000,
        paths: 2000,
        master_seed: 4,
        ..Default::default()
    };
    let b = simulate(&Market::Vasicek(m.clone()), &pi, &ConsumptionRule::AnnuityCertain, &cfg).unwrap();
    let table = vol_check(&b, &m, &pi, &abar).unwrap();
    assert!(!table.rows.is_empty());
    for row in &table.rows {
        assert!(row.predicted_sigma < 1e-3, "{row:?}");
        assert!(row.realized_var <= 1e-6, "{row:?}");
    }
}

#[test]
fn deterministic_rate_vol_is_the_stock_loading() {
    // σ_r = 0, π₂ = 0.4, σ₂₂ = 0.18: σ_c = 0.072
    let m = vasicek(0.0);
    let pi = InvestmentStrategy::State(StateStrategy::time_only(
        RateCurve::constant(0.0),
        RateCurve::constant(0.4),
    ));
    let grid = Grid2D::around(&m, 201, 21).unwrap();
    let surface = solve_mcs_pde(&m, &pi, &grid).unwrap();
    let cfg = SimConfig {
        steps: 2000,
        paths: 20_000,
        master_seed: 8,
        ..Default::default()
    };
    let b = simulate(
        &Market::Vasicek(m.clone()),
        &pi,
        &ConsumptionRule::PdeSurface(surface.field.clone()),
        &cfg,
    )
    .unwrap();
    let table = vol_check(&b, &m, &pi, &surface).unwrap();
    for row in &table.rows {
        assert!((row.predicted_sigma - 0.072).abs() < 1e-12, "{row:?}");
        assert!(row.rel_error <= 0.05, "{row:?}");
    }

    let zero = InvestmentStrategy::State(StateStrategy::time_only(
        RateCurve::constant(0.0),
        RateCurve::constant(0.0),
    ));
    let surface = solve_mcs_pde(&m, &zero, &grid).unwrap();
    let b = simulate(
        &Market::Vasicek(m.clone()),
        &zero,
        &ConsumptionRule::PdeSurface(surface.field.clone()),
        &cfg,
    )
    .unwrap();
    let table = vol_check(&b, &m, &zero, &surface).unwrap();
    assert!(table.rows.iter().all(|r| r.predicted_sigma == 0.0));
}

#[test]
fn config_errors_are_reported() {
    let market = black_scholes(0.02, 0.2, 0.25, 10.0);
    let pi = InvestmentStrategy::constant(&[0.6]);
    let bad_time = SimConfig {
        steps: 10,
        report_times: vec![0.55],
        ..Default::default()
    };
    assert!(matches!(
        simulate(&market, &pi, &mcs_rule(0.6), &bad_time),
        Err(McsError::Config(_))
    ));
    let one_step = SimConfig {
        steps: 1,
        ..Default::default()
    };
    assert!(simulate(&market, &pi, &mcs_rule(0.6), &one_step).is_err());
    // a Vasicek-only rule in the deterministic regime
    assert!(simulate(&market, &pi, &ConsumptionRule::AnnuityCertain, &SimConfig::default()).is_err());
}
