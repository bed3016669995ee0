use mcs_core::annuity::factor_on_grid;
use mcs_core::discrete::evaluate;
use mcs_core::pde::{solve_annuity_pde, RefinementRow};
use mcs_core::sim::{PathBundle, Z_THRESHOLD};
use mcs_core::strategy::merton_rate_curve;
use mcs_core::{
    alpha_c_sup, annuity_certain_surface, candidate_factor, exhaustion_check, hedge_refinement, martingale_test,
    martingale_verify, mcs_refinement, merton_policy, simulate, solve_mcs_pde, solve_recursion, vol_check, Command,
    ConsumptionRule, ExhaustionStats, ExperimentSpec, FactorSurface, Grid2D, InvestmentStrategy, Market,
    MartingaleReport, McsError, Provenance, RateFn, RuleSpec, SimConfig, StrategySpec, TimeGrid, VasicekMarket,
};

use crate::output::{finite, Artifacts, Cell};
use crate::CliError;

/// `paths.csv` keeps this many paths; the rest are summarized in `report.csv`.
pub const PATHS_CSV_LIMIT: usize = 1000;

type Res = Result<(), CliError>;

pub fn dispatch(cmd: Command, spec: &ExperimentSpec, art: &mut Artifacts, assert_martingale: bool) -> Res {
    match cmd {
        Command::Factor => factor(spec, art),
        Command::Simulate => simulate_cmd(spec, art, assert_martingale),
        Command::Pde => pde(spec, art),
        Command::Annuity => annuity(spec, art),
        Command::Discrete => discrete(spec, art),
        Command::CompareMerton => compare_merton(spec, art, assert_martingale),
        Command::Convergence => convergence(spec, art),
    }
}

fn config(msg: &str) -> CliError {
    McsError::Config(msg.to_string()).into()
}

fn factor(spec: &ExperimentSpec, art: &mut Artifacts) -> Res {
    match spec.market()? {
        Market::Deterministic(dm) => {
            let pi = match (&spec.strategy, &spec.rule) {
                (None, Some(r)) if !matches!(r, RuleSpec::Mcs) => InvestmentStrategy::constant(&vec![0.0; dm.assets()]),
                _ => spec.strategy()?,
            };
            let rule = spec.rule_on(&pi, None)?;
            let curve = rule.factor_curve(dm)?.expect("deterministic rules have a curve");
            let grid = TimeGrid::uniform(dm.horizon, spec.sim.steps)?;
            let (z, _) = factor_on_grid(&curve, &grid);
            art.note("rule", rule.kind());
            art.note("factor_at_0", finite(z[0]));
            let rows = grid
                .points()
                .iter()
                .zip(&z)
                .map(|(&t, &z)| [Cell::from(t), curve.rate(t).into(), z.into()]);
            art.csv("factor.csv", &["t", "f", "Z"], rows)
        }
        Market::Vasicek(m) => {
            let grid = spec.grid()?;
            let pi = spec.strategy_on(Some(&grid))?;
            let surface = surface_for(spec, m, &pi, &grid)?;
            art.note("rule", surface.provenance.as_str());
            art.note("factor_at_0", finite(surface.eval(0.0, m.r0)));
            let rows = (0..grid.n_t).map(|i| {
                let t = grid.t_at(i);
                [
                    Cell::from(t),
                    surface.eval(t, m.r0).into(),
                    surface.duration(t, m.r0).into(),
                ]
            });
            art.csv("factor.csv", &["t", "Z_at_r0", "duration_at_r0"], rows)
        }
    }
}

/// The surface behind the configured Vasicek rule.
fn surface_for(
    spec: &ExperimentSpec,
    m: &VasicekMarket,
    pi: &InvestmentStrategy,
    grid: &Grid2D,
) -> Result<FactorSurface, CliError> {
    Ok(match spec.rule.clone().unwrap_or(RuleSpec::Mcs) {
        RuleSpec::Mcs => solve_mcs_pde(m, pi, grid)?,
        RuleSpec::AnnuityCertain => annuity_certain_surface(m, grid)?,
        _ => {
            return Err(config(
                "rule: the vasicek regime supports the mcs and annuity-certain rules",
            ))
        }
    })
}

fn write_report(art: &mut Artifacts, prefix: &str, report: &MartingaleReport) -> Res {
    art.csv(
        &format!("{prefix}report.csv"),
        &["t", "t_sample", "mean_c", "se", "z"],
        report.rows.iter().map(|r| {
            [
                Cell::from(r.t),
                r.t_sample.into(),
                r.mean_c.into(),
                r.se.into(),
                r.z.into(),
            ]
        }),
    )
}

fn write_exhaustion(art: &mut Artifacts, name: &str, ex: &ExhaustionStats) -> Res {
    art.csv(
        name,
        &[
            "t_last",
            "max_ratio",
            "mean_ratio",
            "bound",
            "terminal_max",
            "budget_max_error",
            "budget_mean",
        ],
        [[
            Cell::from(ex.t_last),
            ex.max_ratio.into(),
            ex.mean_ratio.into(),
            ex.bound.into(),
            ex.terminal_max.into(),
            ex.budget_max_error.into(),
            ex.budget_mean.into(),
        ]],
    )
}

fn write_paths(art: &mut Artifacts, b: &PathBundle) -> Res {
    let keep = b.paths().min(PATHS_CSV_LIMIT);
    let rows = (0..keep).flat_map(|p| {
        b.reports.iter().enumerate().map(move |(j, rep)| {
            let pt = b.point(p, j);
            [Cell::from(p), rep.t.into(), pt.x.into(), pt.c.into(), pt.r.into()]
        })
    });
    art.csv("paths.csv", &["path_id", "t", "X", "c", "r"], rows)
}

fn check_martingale(art: &mut Artifacts, report: &MartingaleReport, assert: bool) -> Res {
    art.note("max_abs_z", finite(report.max_abs_z()));
    art.note("martingale_passes", report.passes(Z_THRESHOLD));
    if assert && !report.passes(Z_THRESHOLD) {
        return Err(CliError::MartingaleRejected {
            max_abs_z: report.max_abs_z(),
            threshold: Z_THRESHOLD,
        });
    }
    Ok(())
}

fn simulate_cmd(spec: &ExperimentSpec, art: &mut Artifacts, assert: bool) -> Res {
    let market = spec.market()?;
    let grid = match market {
        Market::Vasicek(_) => Some(spec.grid()?),
        Market::Deterministic(_) => None,
    };
    let pi = spec.strategy_on(grid.as_ref())?;
    let (rule, surface) = match (market, &grid) {
        (Market::Vasicek(m), Some(g)) => {
            let s = surface_for(spec, m, &pi, g)?;
            let rule = match s.provenance {
                Provenance::ClosedFormAnnuity => ConsumptionRule::AnnuityCertain,
                _ => ConsumptionRule::PdeSurface(s.field.clone()),
            };
            (rule, Some(s))
        }
        _ => (spec.rule_on(&pi, None)?, None),
    };
    let bundle = simulate(market, &pi, &rule, &spec.sim)?;
    let mut report = martingale_test(&bundle);
    if let (Market::Vasicek(m), Some(s)) = (market, &surface) {
        report.vol = Some(vol_check(&bundle, m, &pi, s)?);
    }
    art.note("rule", rule.kind());
    art.note("paths", bundle.paths() as i64);
    art.note("c0", finite(bundle.c0));
    art.note("realized_drift", finite(report.realized_drift));
    write_report(art, "", &report)?;
    write_exhaustion(art, "exhaustion.csv", &report.exhaustion)?;
    write_paths(art, &bundle)?;
    if let Some(reg) = &report.regression {
        art.note("regression_max_abs_t", finite(reg.max_abs_t()));
        art.csv(
            "regression.csv",
            &["term", "coef", "se", "t"],
            reg.terms
                .iter()
                .map(|t| [Cell::from(t.name), t.coef.into(), t.se.into(), t.t.into()]),
        )?;
    }
    if let Some(vol) = &report.vol {
        art.note("vol_max_rel_error", finite(vol.max_rel_error()));
        art.csv(
            "vol.csv",
            &["t", "predicted_sigma", "realized_sigma", "rel_error", "realized_var"],
            vol.rows.iter().map(|r| {
                [
                    Cell::from(r.t),
                    r.predicted_sigma.into(),
                    r.realized_sigma.into(),
                    r.rel_error.into(),
                    r.realized_var.into(),
                ]
            }),
        )?;
    }
    check_martingale(art, &report, assert)
}

fn vasicek(spec: &ExperimentSpec) -> Result<&VasicekMarket, CliError> {
    match spec.market()? {
        Market::Vasicek(m) => Ok(m),
        Market::Deterministic(_) => Err(config("market: this command needs the vasicek regime")),
    }
}

/// `grid` with `k` fewer doublings, so that refining it `k` times gives `grid` back.
fn coarsened(grid: &Grid2D, k: u32) -> Result<Grid2D, CliError> {
    let f = 1usize << k;
    let (it, ir) = (grid.n_t - 1, grid.n_r - 1);
    if it % f != 0 || ir % f != 0 || it / f < 2 || ir / f < 2 {
        return Err(config(&format!(
            "refine: a {}x{} grid cannot be halved {k} times",
            grid.n_t, grid.n_r
        )));
    }
    Ok(Grid2D::new(
        grid.horizon,
        it / f + 1,
        ir / f + 1,
        grid.r_min,
        grid.r_max,
    )?)
}

fn refinement(spec: &ExperimentSpec, m: &VasicekMarket, grid: &Grid2D, art: &mut Artifacts) -> Res {
    let k = spec.refine;
    let base = coarsened(grid, k)?;
    let rows: Vec<RefinementRow> = if matches!(spec.strategy, Some(StrategySpec::AnnuityHedge)) {
        art.note("refinement_reference", "closed-form annuity");
        hedge_refinement(m, &base, k)?
    } else {
        art.note("refinement_reference", "next finer grid");
        mcs_refinement(m, &spec.strategy_on(Some(&base))?, &base, k)?
    };
    art.csv(
        "refinement.csv",
        &["n_t", "n_r", "max_rel_error", "ratio"],
        rows.iter()
            .map(|r| [Cell::from(r.n_t), r.n_r.into(), r.error.into(), r.ratio.into()]),
    )
}

fn pde(spec: &ExperimentSpec, art: &mut Artifacts) -> Res {
    let m = vasicek(spec)?;
    let grid = spec.grid()?;
    let pi = spec.strategy_on(Some(&grid))?;
    let surface = solve_mcs_pde(m, &pi, &grid)?;
    art.note("a_at_r0", finite(surface.eval(0.0, m.r0)));
    art.note("alpha_c_sup", finite(alpha_c_sup(&surface, m, &pi)?));
    let rows = (0..grid.n_t).flat_map(|i| {
        let s = &surface;
        (0..grid.n_r).map(move |j| {
            [
                Cell::from(grid.t_at(i)),
                grid.r_at(j).into(),
                s.field.at(i, j).into(),
                s.node_duration(i, j).into(),
            ]
        })
    });
    art.csv("surface.csv", &["t", "r", "a", "duration"], rows)?;
    if spec.refine > 0 {
        refinement(spec, m, &grid, art)?;
    }
    Ok(())
}

fn annuity(spec: &ExperimentSpec, art: &mut Artifacts) -> Res {
    match spec.market()? {
        Market::Deterministic(dm) => {
            let grid = TimeGrid::uniform(dm.horizon, spec.sim.steps)?;
            let (b, _) = factor_on_grid(&dm.rate, &grid);
            art.note("annuity_at_0", finite(b[0]));
            art.csv(
                "annuity.csv",
                &["t", "B_r"],
                grid.points().iter().zip(&b).map(|(&t, &b)| [Cell::from(t), b.into()]),
            )
        }
        Market::Vasicek(m) => {
            let grid = spec.grid()?;
            let exact = annuity_certain_surface(m, &grid)?;
            let solved = solve_annuity_pde(m, &grid)?;
            art.note("max_rel_error", finite(solved.max_relative_error(&exact)?));
            let rows = (0..grid.n_t).flat_map(|i| {
                let (e, s) = (&exact, &solved);
                (0..grid.n_r).map(move |j| {
                    let (a, b) = (e.field.at(i, j), s.field.at(i, j));
                    let rel = if a == 0.0 { 0.0 } else { (b - a) / a };
                    [
                        Cell::from(grid.t_at(i)),
                        grid.r_at(j).into(),
                        a.into(),
                        b.into(),
                        rel.into(),
                    ]
                })
            });
            art.csv("annuity.csv", &["t", "r", "closed_form", "pde", "rel_error"], rows)
        }
    }
}

fn discrete(spec: &ExperimentSpec, art: &mut Artifacts) -> Res {
    let tree = spec.tree()?;
    let x0 = spec.sim.x0;
    let mut checks = Vec::new();
    for (name, factors) in [
        ("recursion", solve_recursion(&tree)?),
        ("candidate", candidate_factor(&tree)?),
    ] {
        let states = evaluate(&tree, &factors, x0);
        let rows = tree.nodes().iter().enumerate().skip(1).map(|(id, node)| {
            [
                Cell::from(id),
                node.period.into(),
                factors.a(id).unwrap_or(f64::NAN).into(),
                states[id].c.into(),
                states[id].x.into(),
            ]
        });
        art.csv(&format!("{name}.csv"), &["node_id", "period", "a", "C", "X"], rows)?;
        let check = martingale_verify(&tree, &factors);
        art.note(&format!("{name}_max_violation"), finite(check.max_violation));
        checks.push((name, check));
    }
    art.note("periods", tree.periods() as i64);
    art.csv(
        "check.csv",
        &["method", "max_violation", "max_terminal_wealth"],
        checks
            .iter()
            .map(|(n, c)| [Cell::from(*n), c.max_violation.into(), c.max_terminal_wealth.into()]),
    )
}

fn compare_merton(spec: &ExperimentSpec, art: &mut Artifacts, assert: bool) -> Res {
    let Market::Deterministic(dm) = spec.market()? else {
        return Err(config("market: compare-merton needs the deterministic regime"));
    };
    let Some(RuleSpec::Merton { gamma, .. }) = spec.rule.clone() else {
        return Err(config("rule: compare-merton needs a merton rule"));
    };
    let merton = spec.rule_on(&InvestmentStrategy::constant(&[]), None)?;
    let ConsumptionRule::Merton { prefs } = &merton else {
        unreachable!("merton spec resolves to a merton rule")
    };
    let pi_star = merton_policy(dm, prefs, 0.0)?
        .pi_star
        .ok_or_else(|| config("market: compare-merton needs one risky asset"))?;
    let pi = match &spec.strategy {
        Some(_) => spec.strategy()?,
        None => InvestmentStrategy::constant(&[pi_star]),
    };
    let pi_curves = pi.deterministic_pi()?.to_vec();
    let mcs = ConsumptionRule::McsDeterministic { pi: pi_curves.clone() };

    let grid = TimeGrid::uniform(dm.horizon, spec.sim.steps)?;
    let f2 = merton_rate_curve(dm, prefs)?;
    let f3 = mcs_core::strategy::f3_curve(dm, &pi_curves)?;
    let (b2, _) = factor_on_grid(&f2, &grid);
    let (b3, _) = factor_on_grid(&f3, &grid);
    let rows = grid.points().iter().enumerate().map(|(k, &t)| {
        let f1 = (prefs.beta.rate(t) - (1.0 - gamma) * dm.rate.rate(t)) / gamma;
        [
            Cell::from(t),
            f1.into(),
            f2.rate(t).into(),
            f3.rate(t).into(),
            b2[k].into(),
            b3[k].into(),
        ]
    });
    art.csv("factors.csv", &["t", "f1", "f2", "f3", "B_f2", "B_f3"], rows)?;

    let market = Market::Deterministic(dm.clone());
    let a = simulate(&market, &pi, &mcs, &spec.sim)?;
    let b = simulate(&market, &pi, &merton, &spec.sim)?;
    let (ra, rb) = (martingale_test(&a), martingale_test(&b));
    let rows = a.reports.iter().enumerate().map(|(j, rep)| {
        let diff = a
            .column(j)
            .zip(b.column(j))
            .map(|(p, q)| ((q.c - p.c) / p.c).abs())
            .fold(0.0, f64::max);
        let (x, y) = (&ra.rows[j], &rb.rows[j]);
        [
            Cell::from(rep.t),
            x.mean_c.into(),
            x.se.into(),
            x.z.into(),
            y.mean_c.into(),
            y.se.into(),
            y.z.into(),
            diff.into(),
        ]
    });
    art.csv(
        "paths_summary.csv",
        &[
            "t",
            "mean_c_mcs",
            "se_mcs",
            "z_mcs",
            "mean_c_merton",
            "se_merton",
            "z_merton",
            "max_rel_diff",
        ],
        rows,
    )?;
    art.note("pi_star", finite(pi_star));
    art.note("merton_max_abs_z", finite(rb.max_abs_z()));
    check_martingale(art, &ra, assert)
}

fn convergence(spec: &ExperimentSpec, art: &mut Artifacts) -> Res {
    let market = spec.market()?;
    let k = if spec.refine == 0 { 3 } else { spec.refine };
    art.note("doublings", k as i64);
    if let Market::Vasicek(m) = market {
        let grid = spec.grid()?;
        let spec = ExperimentSpec {
            refine: k,
            ..spec.clone()
        };
        refinement(&spec, m, &grid, art)?;
    }
    let grid = match market {
        Market::Vasicek(_) => Some(spec.grid()?),
        Market::Deterministic(_) => None,
    };
    let pi = spec.strategy_on(grid.as_ref())?;
    let rule = spec.rule_on(&pi, grid.as_ref())?;
    let mut rows = Vec::new();
    let mut prev: Option<f64> = None;
    for level in 0..=k {
        let cfg = SimConfig {
            steps: spec.sim.steps << level,
            qv_window: spec.sim.qv_window,
            ..spec.sim.clone()
        };
        let ex = exhaustion_check(&simulate(market, &pi, &rule, &cfg)?);
        let ratio = prev.map_or(f64::NAN, |p| p / ex.mean_ratio);
        prev = Some(ex.mean_ratio);
        rows.push([
            Cell::from(cfg.steps),
            ex.max_ratio.into(),
            ex.mean_ratio.into(),
            ex.bound.into(),
            ratio.into(),
            ex.budget_max_error.into(),
        ]);
    }
    art.csv(
        "exhaustion.csv",
        &[
            "steps",
            "max_ratio",
            "mean_ratio",
            "bound",
            "mean_ratio_halving",
            "budget_max_error",
        ],
        rows,
    )
}
