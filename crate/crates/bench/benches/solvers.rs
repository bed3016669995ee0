use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mcs_bench::{black_scholes, vasicek};
use mcs_core::{
    simulate, solve_mcs_pde, solve_recursion, ConsumptionRule, Grid2D, InvestmentStrategy, Market, RateCurve,
    ScenarioTree, SimConfig, StateStrategy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simulation(c: &mut Criterion) {
    let market = Market::Deterministic(black_scholes());
    let pi = InvestmentStrategy::constant(&[0.6]);
    let rule = ConsumptionRule::McsDeterministic {
        pi: vec![RateCurve::constant(0.6)],
    };
    let cfg = SimConfig {
        paths: 10_000,
        steps: 1_000,
        ..Default::default()
    };
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    g.bench_function("deterministic 1e4 x 1e3", |b| {
        b.iter(|| simulate(&market, &pi, &rule, black_box(&cfg)).unwrap())
    });
    g.finish();
}

fn pde(c: &mut Criterion) {
    let m = vasicek();
    let pi = InvestmentStrategy::State(StateStrategy::time_only(
        RateCurve::constant(0.2),
        RateCurve::glide(0.6, 0.1, 20.0),
    ));
    let grid = Grid2D::around(&m, 201, 201).unwrap();
    let mut g = c.benchmark_group("pde");
    g.sample_size(10);
    g.bench_function("mcs 201x201", |b| {
        b.iter(|| solve_mcs_pde(&m, &pi, black_box(&grid)).unwrap())
    });
    g.finish();
}

fn discrete(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trees: Vec<ScenarioTree> = (0..64).map(|_| ScenarioTree::random(&mut rng, 5, 4)).collect();
    c.bench_function("recursion on 64 random trees", |b| {
        b.iter(|| {
            for t in &trees {
                black_box(solve_recursion(t).unwrap());
            }
        })
    });
}

criterion_group!(benches, simulation, pde, discrete);
criterion_main!(benches);
