//! Monte Carlo simulation of wealth and consumption under a factor rule
//! `c = X/Z`.
//!
//! Paths run in independent batches. Batch `b` draws its normals from
//! `ChaCha8Rng::seed_from_u64(master_seed)` on stream `b`, so a bundle
//! depends only on the configuration and the seed, never on the thread
//! schedule. With antithetic sampling, consecutive paths `2i` and `2i + 1`
//! share one noise draw with opposite signs.
//!
//! Deterministic regime, exact scheme: the log consumption rate moves by
//! `∫(r + π(α − r) − f) − ½∫‖πσ‖² + Σ_j (∫(πσ)_j²)^{1/2} z_j` per step,
//! which is exact in law for deterministic coefficients, and wealth is
//! read off as `X = c·B_f`. This uses the identity `∫1/B_f = ∫f − Δ ln B_f`
//! for the consumption drain, so `X(T) = 0` holds exactly.
//!
//! Vasicek regime, exact scheme: coefficients are frozen at `(t_k, r(t_k))`
//! and the short rate takes the exact Ornstein–Uhlenbeck transition driven
//! by the same normal as the wealth's W₁ increment. The drain over a step is
//! `½(1/q_k + 1/q_{k+1})·ln((T − t_k)/(T − t_{k+1}))` with `q = a/(T − t)`,
//! which integrates the `1/(T − t)` singularity exactly. The factor surface
//! is interpolated through q (smooth, with q → 1 at T) rather than through
//! a, whose linear-in-t interpolation carries an O(Δt) relative error in the
//! last surface interval.

mod diagnostics;

pub use diagnostics::{
    exhaustion_check, martingale_test, vol_check, ExhaustionStats, MartingaleReport, MartingaleRow, Regression,
    RegressionTerm, VolRow, VolTable, Z_THRESHOLD,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annuity::factor_on_grid;
use crate::curve::{CurveExpr, RateFn};
use crate::error::{McsError, Result};
use crate::field::Field2D;
use crate::market::{DeterministicMarket, Market, OuStep, RateScheme, TimeGrid, VasicekMarket};
use crate::pde::{annuity_certain_surface, Grid2D};
use crate::quadrature::GaussLegendre;
use crate::strategy::{ConsumptionRule, InvestmentStrategy, StateFn, StateStrategy};

/// Grid used to tabulate the closed-form annuity certain for simulation.
pub const ANNUITY_TABLE_NT: usize = 401;
pub const ANNUITY_TABLE_NR: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    ExactLognormal,
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub x0: f64,
    pub steps: usize,
    pub paths: usize,
    pub master_seed: u64,
    pub scheme: Scheme,
    pub rate_scheme: RateScheme,
    /// Grid times at which path values are kept; empty means `jT/10`, j = 1..=10.
    pub report_times: Vec<f64>,
    pub antithetic: bool,
    /// Steps in the realized-volatility window that starts at each report time.
    pub qv_window: usize,
    pub batch_size: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            x0: 1.0,
            steps: 1000,
            paths: 1000,
            master_seed: 0,
            scheme: Scheme::ExactLognormal,
            rate_scheme: RateScheme::Exact,
            report_times: Vec::new(),
            antithetic: true,
            qv_window: 16,
            batch_size: 1024,
        }
    }
}

/// A report time snapped to the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportTime {
    pub t: f64,
    pub index: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.x0 > 0.0) || !self.x0.is_finite() {
            return Err(McsError::Config(format!("x0 must be positive, got {}", self.x0)));
        }
        if self.steps < 2 {
            return Err(McsError::Config(format!("steps must be >= 2, got {}", self.steps)));
        }
        if self.paths == 0 {
            return Err(McsError::Config("paths must be >= 1".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(McsError::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.qv_window == 0 || self.qv_window >= self.steps {
            return Err(McsError::Config(format!(
                "qv_window must lie in [1, steps), got {}",
                self.qv_window
            )));
        }
        Ok(())
    }

    /// Report times as grid indices; errors if a time is not a grid point.
    pub fn snapped_reports(&self, horizon: f64) -> Result<Vec<ReportTime>> {
        let dt = horizon / self.steps as f64;
        let wanted: Vec<f64> = if self.report_times.is_empty() {
            (1..=10).map(|j| horizon * j as f64 / 10.0).collect()
        } else {
            self.report_times.clone()
        };
        let mut out: Vec<ReportTime> = Vec::with_capacity(wanted.len());
        for &t in &wanted {
            let x = t / dt;
            let index = x.round();
            if !(index >= 0.0 && index <= self.steps as f64) || (x - index).abs() > 1e-6 {
                return Err(McsError::Config(format!(
                    "report time {t} is not a point of the {}-step grid on [0, {horizon}]",
                    self.steps
                )));
            }
            let index = index as usize;
            let t = if index == self.steps {
                horizon
            } else {
                index as f64 * dt
            };
            out.push(ReportTime { t, index });
        }
        out.sort_by_key(|r| r.index);
        out.dedup_by_key(|r| r.index);
        Ok(out)
    }
}

/// Path values kept at the report times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub x: f64,
    /// Consumption rate; at t = T this is the last grid value c(T − Δ).
    pub c: f64,
    pub r: f64,
    /// First Brownian coordinate W₁(t).
    pub w1: f64,
    /// Σ (Δ ln c)² over the window starting here (NaN if it does not fit before T − Δ).
    pub qv: f64,
}

/// Simulation output. Per-path values are stored at report times only; the
/// full noise of any path is reproducible with [`PathBundle::replay_noise`].
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub horizon: f64,
    pub steps: usize,
    pub x0: f64,
    /// c(0) = x₀/Z(0).
    pub c0: f64,
    pub r0: f64,
    pub stochastic_rate: bool,
    pub scheme: Scheme,
    pub antithetic: bool,
    pub master_seed: u64,
    pub batch_size: usize,
    /// Normals per step.
    pub noise_dims: usize,
    pub qv_window: usize,
    pub reports: Vec<ReportTime>,
    /// `[path * reports.len() + j]`.
    pub points: Vec<PathPoint>,
    /// X(T − Δ) per path.
    pub x_last: Vec<f64>,
    /// X(T) per path.
    pub x_terminal: Vec<f64>,
    /// Left-point quadrature of ∫ c/Y^π dt per path.
    pub budget: Vec<f64>,
}

impl PathBundle {
    pub fn paths(&self) -> usize {
        self.x_last.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn point(&self, path: usize, j: usize) -> &PathPoint {
        &self.points[path * self.reports.len() + j]
    }

    /// Values at report `j`, path by path.
    pub fn column(&self, j: usize) -> impl Iterator<Item = &PathPoint> + '_ {
        self.points.iter().skip(j).step_by(self.reports.len())
    }

    /// Independence cluster of a path (antithetic partners share one).
    pub fn cluster(&self, path: usize) -> usize {
        if self.antithetic {
            path / 2
        } else {
            path
        }
    }

    /// Time at which c is actually sampled for report `j`.
    pub fn sample_time(&self, j: usize) -> f64 {
        let idx = self.reports[j].index.min(self.steps - 1);
        idx as f64 * self.dt()
    }

    /// The `steps × noise_dims` standard normals (sign applied) that drove `path`.
    pub fn replay_noise(&self, path: usize) -> Result<Vec<f64>> {
        if path >= self.paths() {
            return Err(McsError::Config(format!("path {path} out of range")));
        }
        let batch = path / self.batch_size;
        let within = path % self.batch_size;
        let mut rng = batch_rng(self.master_seed, batch);
        let draw_index = if self.antithetic { within / 2 } else { within };
        let mut buf = vec![0.0; self.steps * self.noise_dims];
        for _ in 0..=draw_index {
            fill_normals(&mut rng, &mut buf);
        }
        if self.antithetic && within % 2 == 1 {
            buf.iter_mut().for_each(|z| *z = -*z);
        }
        Ok(buf)
    }
}

fn batch_rng(master: u64, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(batch as u64);
    rng
}

fn fill_normals(rng: &mut ChaCha8Rng, buf: &mut [f64]) {
    for z in buf.iter_mut() {
        *z = StandardNormal.sample(rng);
    }
}

/// Simulates `cfg.paths` paths of (X, c, r) under strategy `pi` and `rule`.
pub fn simulate(
    market: &Market,
    pi: &InvestmentStrategy,
    rule: &ConsumptionRule,
    cfg: &SimConfig,
) -> Result<PathBundle> {
    cfg.validate()?;
    market.validate()?;
    let horizon = market.horizon();
    let reports = cfg.snapped_reports(horizon)?;
    let plan = match market {
        Market::Deterministic(m) => Plan::Deterministic(DetPlan::new(m, pi, rule, cfg)?),
        Market::Vasicek(m) => Plan::Vasicek(VasPlan::new(m, pi, rule, cfg)?),
    };
    let layout = Layout::new(cfg, &reports);
    let n_batches = cfg.paths.div_ceil(cfg.batch_size);
    let batches: Vec<Recorder> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let first = b * cfg.batch_size;
            let count = cfg.batch_size.min(cfg.paths - first);
            run_batch(&plan, &layout, cfg, b, first, count)
        })
        .collect::<Result<Vec<_>>>()?;

    let n_rep = reports.len();
    let mut bundle = PathBundle {
        horizon,
        steps: cfg.steps,
        x0: cfg.x0,
        c0: plan.c0(cfg.x0),
        r0: plan.r0(),
        stochastic_rate: matches!(market, Market::Vasicek(_)),
        scheme: cfg.scheme,
        antithetic: cfg.antithetic,
        master_seed: cfg.master_seed,
        batch_size: cfg.batch_size,
        noise_dims: plan.dims(),
        qv_window: cfg.qv_window,
        reports,
        points: Vec::with_capacity(cfg.paths * n_rep),
        x_last: Vec::with_capacity(cfg.paths),
        x_terminal: Vec::with_capacity(cfg.paths),
        budget: Vec::with_capacity(cfg.paths),
    };
    for rec in batches {
        bundle.points.extend(rec.points);
        bundle.x_last.extend(rec.x_last);
        bundle.x_terminal.extend(rec.x_terminal);
        bundle.budget.extend(rec.budget);
    }
    Ok(bundle)
}

/// Where report values and volatility windows fall on the step grid.
struct Layout {
    steps: usize,
    report_index: Vec<usize>,
    /// For step k (t_k → t_{k+1}), the report range whose windows contain it.
    window_lo: Vec<usize>,
    window_hi: Vec<usize>,
    /// Grid indices whose state must be recorded (report times and T − Δ).
    record: Vec<bool>,
}

impl Layout {
    fn new(cfg: &SimConfig, reports: &[ReportTime]) -> Self {
        let n = cfg.steps;
        let w = cfg.qv_window;
        let mut window_lo = vec![0; n];
        let mut window_hi = vec![0; n];
        for k in 0..n {
            // windows [i, i + w) that end by step n − 2 (c is defined up to T − Δ)
            let inside = |r: &ReportTime| r.index + w <= n - 1 && r.index <= k && k < r.index + w;
            let lo = reports.iter().position(inside);
            if let Some(lo) = lo {
                let hi = lo + reports[lo..].iter().take_while(|r| inside(r)).count();
                window_lo[k] = lo;
                window_hi[k] = hi;
            }
        }
        let mut record = vec![false; n + 1];
        record[n - 1] = true;
        for r in reports {
            record[r.index] = true;
        }
        Self {
            steps: n,
            record,
            report_index: reports.iter().map(|r| r.index).collect(),
            window_lo,
            window_hi,
        }
    }

    fn window_fits(&self, j: usize, w: usize) -> bool {
        self.report_index[j] + w <= self.steps - 1
    }
}

/// Per-batch output buffers plus the running state of the current path.
struct Recorder {
    n_rep: usize,
    points: Vec<PathPoint>,
    x_last: Vec<f64>,
    x_terminal: Vec<f64>,
    budget: Vec<f64>,
    next_report: usize,
    base: usize,
    last_c: f64,
}

impl Recorder {
    fn new(n_rep: usize, count: usize) -> Self {
        Self {
            n_rep,
            points: Vec::with_capacity(n_rep * count),
            x_last: Vec::with_capacity(count),
            x_terminal: Vec::with_capacity(count),
            budget: Vec::with_capacity(count),
            next_report: 0,
            base: 0,
            last_c: f64::NAN,
        }
    }

    fn begin_path(&mut self, layout: &Layout, w: usize) {
        self.base = self.points.len();
        for j in 0..self.n_rep {
            let qv = if layout.window_fits(j, w) { 0.0 } else { f64::NAN };
            self.points.push(PathPoint {
                x: f64::NAN,
                c: f64::NAN,
                r: f64::NAN,
                w1: f64::NAN,
                qv,
            });
        }
        self.next_report = 0;
        self.last_c = f64::NAN;
    }

    /// State at grid index k (c is ignored at k = steps).
    #[inline]
    fn at_node(&mut self, layout: &Layout, k: usize, x: f64, c: f64, r: f64, w1: f64) {
        if k < layout.steps {
            self.last_c = c;
        }
        if k == layout.steps - 1 {
            self.x_last.push(x);
        }
        while self.next_report < self.n_rep && layout.report_index[self.next_report] == k {
            let p = &mut self.points[self.base + self.next_report];
            p.x = x;
            p.c = self.last_c;
            p.r = r;
            p.w1 = w1;
            self.next_report += 1;
        }
    }

    #[inline]
    fn add_qv(&mut self, layout: &Layout, k: usize, dlnc: f64) {
        for j in layout.window_lo[k]..layout.window_hi[k] {
            self.points[self.base + j].qv += dlnc * dlnc;
        }
    }

    fn end_path(&mut self, x_terminal: f64, budget: f64) {
        self.x_terminal.push(x_terminal);
        self.budget.push(budget);
    }
}

enum Plan {
    Deterministic(DetPlan),
    Vasicek(VasPlan),
}

impl Plan {
    fn dims(&self) -> usize {
        match self {
            Plan::Deterministic(p) => p.dims,
            Plan::Vasicek(_) => 2,
        }
    }

    fn c0(&self, x0: f64) -> f64 {
        match self {
            Plan::Deterministic(p) => x0 / p.factor[0],
            Plan::Vasicek(p) => x0 / p.a0,
        }
    }

    fn r0(&self) -> f64 {
        match self {
            Plan::Deterministic(p) => p.rate[0],
            Plan::Vasicek(p) => p.market.r0,
        }
    }
}

fn run_batch(
    plan: &Plan,
    layout: &Layout,
    cfg: &SimConfig,
    batch: usize,
    first: usize,
    count: usize,
) -> Result<Recorder> {
    let mut rng = batch_rng(cfg.master_seed, batch);
    let mut rec = Recorder::new(layout.report_index.len(), count);
    let mut noise = vec![0.0; cfg.steps * plan.dims()];
    let mut i = 0;
    while i < count {
        fill_normals(&mut rng, &mut noise);
        let signs: &[f64] = if cfg.antithetic && i + 1 < count {
            &[1.0, -1.0]
        } else {
            &[1.0]
        };
        for &sign in signs {
            rec.begin_path(layout, cfg.qv_window);
            let id = first + i;
            match plan {
                Plan::Deterministic(p) => p.run_path(layout, cfg, &noise, sign, id, &mut rec)?,
                Plan::Vasicek(p) => p.run_path(layout, cfg, &noise, sign, id, &mut rec)?,
            }
            i += 1;
        }
    }
    Ok(rec)
}

/// ∫_a^b f: closed form if available, else 8-point Gauss–Legendre split at breakpoints.
fn step_integral<R: RateFn + ?Sized>(f: &R, rule: &GaussLegendre, breaks: &[f64], a: f64, b: f64) -> f64 {
    if let Some(c) = f.constant_value() {
        return c * (b - a);
    }
    if let Some(v) = f.cumulative(a, b) {
        return v;
    }
    let mut knots = vec![a];
    knots.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    knots.push(b);
    knots
        .windows(2)
        .map(|w| rule.integrate(|s| f.rate(s), w[0], w[1]))
        .sum()
}

/// Per-step coefficients for deterministic markets.
struct DetPlan {
    dims: usize,
    /// r at every grid point.
    rate: Vec<f64>,
    step_len: Vec<f64>,
    step_sqrt: Vec<f64>,
    /// B_f at every grid point.
    factor: Vec<f64>,
    /// Exact scheme: drift of ln c and signed RMS loadings `[k * dims + j]`.
    drift: Vec<f64>,
    loading: Vec<f64>,
    /// Euler scheme: left-endpoint growth rate and loadings.
    euler_growth: Vec<f64>,
    euler_loading: Vec<f64>,
    /// Exact scheme: ∫c/Y by the left-point rule (the same on every path).
    exact_budget: Vec<f64>,
}

impl DetPlan {
    fn new(
        market: &DeterministicMarket,
        pi: &InvestmentStrategy,
        rule: &ConsumptionRule,
        cfg: &SimConfig,
    ) -> Result<Self> {
        let pi = pi.deterministic_pi()?;
        if pi.len() != market.assets() {
            return Err(McsError::Config(format!(
                "strategy has {} components but the market has {} risky assets",
                pi.len(),
                market.assets()
            )));
        }
        let f = rule
            .factor_curve(market)?
            .ok_or_else(|| McsError::Config(format!("rule '{}' needs the stochastic-rate regime", rule.kind())))?;
        let grid = TimeGrid::uniform(market.horizon, cfg.steps)?;
        let (factor, f_int) = factor_on_grid(&f, &grid);
        let n = cfg.steps;
        if let Some(k) = (0..n).find(|&k| !(factor[k] > 0.0) || !factor[k].is_finite()) {
            return Err(McsError::Rule {
                t: grid.points()[k],
                factor: factor[k],
            });
        }
        let dims = market.assets();
        // growth r + π(α − r); identical in form to f₃
        let growth = crate::strategy::f3_curve(market, pi)?;
        // (πσ)_j and (πσ)_j²
        let mut loads = Vec::with_capacity(dims);
        let mut squares = Vec::with_capacity(dims);
        for j in 0..dims {
            let mut lin = CurveExpr::new();
            let mut sq = CurveExpr::new();
            for i in 0..dims {
                lin = lin.term(1.0, vec![pi[i].clone(), market.vol[i][j].clone()]);
                for l in 0..dims {
                    sq = sq.term(
                        1.0,
                        vec![
                            pi[i].clone(),
                            market.vol[i][j].clone(),
                            pi[l].clone(),
                            market.vol[l][j].clone(),
                        ],
                    );
                }
            }
            loads.push(lin);
            squares.push(sq);
        }
        let rule8 = GaussLegendre::new(8);
        let mut breaks = growth.breakpoints();
        breaks.extend(f.breakpoints());
        breaks.extend(squares.iter().flat_map(|s| s.breakpoints()));
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();

        let pts = grid.points();
        let mut drift = Vec::with_capacity(n);
        let mut loading = Vec::with_capacity(n * dims);
        let mut euler_growth = Vec::with_capacity(n);
        let mut euler_loading = Vec::with_capacity(n * dims);
        for k in 0..n {
            let (a, b) = (pts[k], pts[k + 1]);
            let mut var = 0.0;
            for j in 0..dims {
                let v2 = step_integral(&squares[j], &rule8, &breaks, a, b).max(0.0);
                let sign = if step_integral(&loads[j], &rule8, &breaks, a, b) < 0.0 {
                    -1.0
                } else {
                    1.0
                };
                var += v2;
                loading.push(sign * v2.sqrt());
                euler_loading.push(loads[j].rate(a) * (b - a).sqrt());
            }
            let g = step_integral(&growth, &rule8, &breaks, a, b);
            drift.push(g - f_int[k] - 0.5 * var);
            euler_growth.push(growth.rate(a));
        }
        // e^{−∫_0^t f}/B_f(0), accumulated left point
        let mut exact_budget = Vec::with_capacity(n);
        let mut disc = 1.0;
        let mut acc = 0.0;
        for k in 0..n {
            acc += cfg.x0 * disc / factor[0] * grid.dt(k);
            exact_budget.push(acc);
            disc *= (-f_int[k]).exp();
        }
        Ok(Self {
            dims,
            rate: pts.iter().map(|&t| market.rate.rate(t)).collect(),
            step_len: (0..n).map(|k| grid.dt(k)).collect(),
            step_sqrt: (0..n).map(|k| grid.dt(k).sqrt()).collect(),
            factor,
            drift,
            loading,
            euler_growth,
            euler_loading,
            exact_budget,
        })
    }

    fn run_path(
        &self,
        layout: &Layout,
        cfg: &SimConfig,
        noise: &[f64],
        sign: f64,
        id: usize,
        rec: &mut Recorder,
    ) -> Result<()> {
        let n = cfg.steps;
        let d = self.dims;
        let mut w1 = 0.0;
        match cfg.scheme {
            Scheme::ExactLognormal => {
                let mut lnc = (cfg.x0 / self.factor[0]).ln();
                let c = lnc.exp();
                rec.at_node(layout, 0, cfg.x0, c, self.rate[0], 0.0);
                for k in 0..n {
                    let z = &noise[k * d..(k + 1) * d];
                    let mut shock = 0.0;
                    for j in 0..d {
                        shock += self.loading[k * d + j] * z[j];
                    }
                    if d > 0 {
                        w1 += sign * z[0] * self.step_sd(k);
                    }
                    let next = lnc + self.drift[k] + sign * shock;
                    if !next.is_finite() {
                        return Err(McsError::NumericalBlowup { path: id, step: k });
                    }
                    if layout.window_lo[k] < layout.window_hi[k] {
                        rec.add_qv(layout, k, next - lnc);
                    }
                    lnc = next;
                    if layout.record[k + 1] {
                        let c = lnc.exp();
                        let x = if k + 1 == n { 0.0 } else { c * self.factor[k + 1] };
                        rec.at_node(layout, k + 1, x, c, self.rate[k + 1], w1);
                    }
                }
                rec.end_path(0.0, self.exact_budget[n - 1]);
            }
            Scheme::Euler => {
                let mut x = cfg.x0;
                let mut y = 1.0;
                let mut budget = 0.0;
                rec.at_node(layout, 0, x, x / self.factor[0], self.rate[0], 0.0);
                for k in 0..n {
                    let h = self.step_dt(k);
                    let z = &noise[k * d..(k + 1) * d];
                    let mut shock = 0.0;
                    for j in 0..d {
                        shock += self.euler_loading[k * d + j] * z[j];
                    }
                    if d > 0 {
                        w1 += sign * z[0] * self.step_sd(k);
                    }
                    let c = x / self.factor[k];
                    budget += c / y * h;
                    let ret = self.euler_growth[k] * h + sign * shock;
                    let next = x * (1.0 + ret) - c * h;
                    y *= 1.0 + ret;
                    if !next.is_finite() || (k + 1 < n && next <= 0.0) {
                        return Err(McsError::NumericalBlowup { path: id, step: k });
                    }
                    if k + 1 < n {
                        let c_next = next / self.factor[k + 1];
                        if layout.window_lo[k] < layout.window_hi[k] {
                            rec.add_qv(layout, k, (c_next / c).ln());
                        }
                        if layout.record[k + 1] {
                            rec.at_node(layout, k + 1, next, c_next, self.rate[k + 1], w1);
                        }
                    } else {
                        rec.at_node(layout, k + 1, next, f64::NAN, self.rate[k + 1], w1);
                    }
                    x = next;
                }
                rec.end_path(x, budget);
            }
        }
        Ok(())
    }

    fn step_dt(&self, k: usize) -> f64 {
        self.step_len[k]
    }

    fn step_sd(&self, k: usize) -> f64 {
        self.step_sqrt[k]
    }
}

/// Strategy lookup per step: precomputed for time-only strategies.
enum PiSource {
    Steps(Vec<[f64; 2]>),
    State(StateStrategy),
}

/// Per-step coefficients for the Vasicek market.
struct VasPlan {
    market: VasicekMarket,
    pi: PiSource,
    /// q = a/(T − t) on the surface grid, with q(T, ·) = 1.
    ratio: Field2D,
    /// Surface row and time weight of each simulation node.
    rows: Vec<(usize, f64)>,
    a0: f64,
    dt: f64,
    times: Vec<f64>,
    ou: OuStep,
    sigma11: Vec<f64>,
    sigma21: Vec<f64>,
    /// ln((T − t_k)/(T − t_{k+1})); infinite on the last step.
    log_ratio: Vec<f64>,
    /// x₀Δ/(T − t_k), so that x₀Δ/a = weight/q.
    budget_weight: Vec<f64>,
}

impl VasPlan {
    fn new(market: &VasicekMarket, pi: &InvestmentStrategy, rule: &ConsumptionRule, cfg: &SimConfig) -> Result<Self> {
        let state = pi.as_state()?;
        let surface = match rule {
            ConsumptionRule::AnnuityCertain => {
                let grid = Grid2D::around(market, ANNUITY_TABLE_NT, ANNUITY_TABLE_NR)?;
                annuity_certain_surface(market, &grid)?.field
            }
            ConsumptionRule::PdeSurface(field) => {
                if (field.horizon() - market.horizon).abs() > 1e-9 * market.horizon {
                    return Err(McsError::Config(format!(
                        "surface horizon {} differs from market horizon {}",
                        field.horizon(),
                        market.horizon
                    )));
                }
                field.clone()
            }
            other => {
                return Err(McsError::Config(format!(
                    "rule '{}' needs the deterministic regime",
                    other.kind()
                )))
            }
        };
        let n = cfg.steps;
        let horizon = market.horizon;
        let dt = horizon / n as f64;
        let times: Vec<f64> = (0..=n).map(|k| if k == n { horizon } else { k as f64 * dt }).collect();
        let time_only = matches!((&state.bond, &state.stock), (StateFn::Time(_), StateFn::Time(_)));
        let pi = if time_only {
            PiSource::Steps(times[..n].iter().map(|&t| state.eval(t, market.r0)).collect())
        } else {
            PiSource::State(state)
        };
        let ratio = ratio_field(&surface)?;
        let rows: Vec<(usize, f64)> = times.iter().map(|&t| ratio.locate_t(t)).collect();
        let a0 = ratio.eval(0.0, market.r0) * horizon;
        if !(a0 > 0.0) {
            return Err(McsError::Rule { t: 0.0, factor: a0 });
        }
        let log_ratio = (0..n)
            .map(|k| {
                if k + 1 == n {
                    f64::INFINITY
                } else {
                    ((horizon - times[k]) / (horizon - times[k + 1])).ln()
                }
            })
            .collect();
        Ok(Self {
            market: market.clone(),
            pi,
            a0,
            dt,
            ou: OuStep::new(market, dt, cfg.rate_scheme),
            sigma11: times[..n].iter().map(|&t| market.sigma11(t, market.r0)).collect(),
            sigma21: times[..n].iter().map(|&t| market.sigma21(t, market.r0)).collect(),
            budget_weight: times[..n].iter().map(|&t| cfg.x0 * dt / (horizon - t)).collect(),
            times,
            log_ratio,
            ratio,
            rows,
        })
    }

    /// q(t_k, r).
    #[inline]
    fn q_at(&self, k: usize, r: f64) -> f64 {
        let (it, wt) = self.rows[k];
        self.ratio.eval_in_rows(it, wt, r)
    }

    #[inline]
    fn pi_at(&self, k: usize, r: f64) -> [f64; 2] {
        match &self.pi {
            PiSource::Steps(v) => v[k],
            PiSource::State(s) => s.eval(self.times[k], r),
        }
    }

    fn run_path(
        &self,
        layout: &Layout,
        cfg: &SimConfig,
        noise: &[f64],
        sign: f64,
        id: usize,
        rec: &mut Recorder,
    ) -> Result<()> {
        let m = &self.market;
        let n = cfg.steps;
        let horizon = m.horizon;
        let sd = self.dt.sqrt();
        let x0 = cfg.x0;
        let mut r = m.r0;
        let mut a = self.a0;
        let mut w1 = 0.0;
        let mut budget = 0.0;
        rec.at_node(layout, 0, x0, x0 / a, r, 0.0);
        match cfg.scheme {
            Scheme::ExactLognormal => {
                let mut lnx = x0.ln();
                let mut inv_q = horizon / a;
                // e^{−∫1/a}
                let mut disc = 1.0;
                for k in 0..n {
                    let z1 = sign * noise[2 * k];
                    let z2 = sign * noise[2 * k + 1];
                    let p = self.pi_at(k, r);
                    let e = p[0] * self.sigma11[k] + p[1] * self.sigma21[k];
                    let s2 = p[1] * m.sigma22;
                    budget += disc * inv_q * self.budget_weight[k];
                    let growth = r + m.lambda1 * e + m.lambda2 * s2 - 0.5 * (e * e + s2 * s2);
                    let r_next = self.ou.advance(m.theta, r, z1);
                    w1 += z1 * sd;
                    let inv_q_next = if k + 1 < n {
                        let q_next = self.q_at(k + 1, r_next);
                        if !(q_next > 0.0) {
                            let t_next = self.times[k + 1];
                            return Err(McsError::Rule {
                                t: t_next,
                                factor: q_next * (horizon - t_next),
                            });
                        }
                        1.0 / q_next
                    } else {
                        1.0
                    };
                    let drain = 0.5 * (inv_q + inv_q_next) * self.log_ratio[k];
                    let lnx_next = lnx + growth * self.dt + (e * z1 + s2 * z2) * sd - drain;
                    if k + 1 < n {
                        if !lnx_next.is_finite() || !r_next.is_finite() {
                            return Err(McsError::NumericalBlowup { path: id, step: k });
                        }
                        disc *= (-drain).exp();
                        let tau = horizon - self.times[k + 1];
                        if layout.window_lo[k] < layout.window_hi[k] {
                            // Δ ln c = Δ ln X − Δ ln q − Δ ln(T − t)
                            let tau0 = horizon - self.times[k];
                            let dlnc = (lnx_next - lnx) + (inv_q_next / inv_q).ln() - (tau / tau0).ln();
                            rec.add_qv(layout, k, dlnc);
                        }
                        if layout.record[k + 1] {
                            let x = lnx_next.exp();
                            rec.at_node(layout, k + 1, x, x * inv_q_next / tau, r_next, w1);
                        }
                    } else {
                        rec.at_node(layout, k + 1, 0.0, f64::NAN, r_next, w1);
                    }
                    lnx = lnx_next;
                    r = r_next;
                    inv_q = inv_q_next;
                }
                rec.end_path(0.0, budget);
            }
            Scheme::Euler => {
                let mut x = x0;
                let mut y = 1.0;
                for k in 0..n {
                    let z1 = sign * noise[2 * k];
                    let z2 = sign * noise[2 * k + 1];
                    let p = self.pi_at(k, r);
                    let e = p[0] * self.sigma11[k] + p[1] * self.sigma21[k];
                    let s2 = p[1] * m.sigma22;
                    let c = x / a;
                    budget += c / y * self.dt;
                    let ret = (r + m.lambda1 * e + m.lambda2 * s2) * self.dt + (e * z1 + s2 * z2) * sd;
                    let x_next = x * (1.0 + ret) - c * self.dt;
                    y *= 1.0 + ret;
                    let r_next = self.ou.advance(m.theta, r, z1);
                    w1 += z1 * sd;
                    let t_next = self.times[k + 1];
                    if k + 1 < n {
                        if !x_next.is_finite() || !(x_next > 0.0) || !r_next.is_finite() {
                            return Err(McsError::NumericalBlowup { path: id, step: k });
                        }
                        let a_next = self.q_at(k + 1, r_next) * (horizon - t_next);
                        if !(a_next > 0.0) {
                            return Err(McsError::Rule {
                                t: t_next,
                                factor: a_next,
                            });
                        }
                        let c_next = x_next / a_next;
                        if layout.window_lo[k] < layout.window_hi[k] {
                            rec.add_qv(layout, k, (c_next / c).ln());
                        }
                        if layout.record[k + 1] {
                            rec.at_node(layout, k + 1, x_next, c_next, r_next, w1);
                        }
                        a = a_next;
                    } else {
                        rec.at_node(layout, k + 1, x_next, f64::NAN, r_next, w1);
                    }
                    x = x_next;
                    r = r_next;
                }
                rec.end_path(x, budget);
            }
        }
        Ok(())
    }
}

/// q = a/(T − t) on the surface grid; the terminal row is the limit 1.
fn ratio_field(surface: &Field2D) -> Result<Field2D> {
    let horizon = surface.horizon();
    let last = surface.n_t() - 1;
    let values = (0..surface.n_t())
        .flat_map(|i| {
            let t = surface.t_at(i);
            surface
                .row(i)
                .iter()
                .map(move |&a| if i == last { 1.0 } else { a / (horizon - t) })
        })
        .collect();
    Field2D::new(
        horizon,
        surface.n_t(),
        surface.r_min(),
        surface.r_max(),
        surface.n_r(),
        values,
    )
}
