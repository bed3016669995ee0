//! Statistical checks on a simulated [`PathBundle`].
//!
//! Standard errors treat antithetic partners as one cluster, so they stay
//! valid when variance reduction is on. Ten report times tested at 3 SE give
//! a family-wise false-alarm rate near 2.7% under independence; flags are
//! meant to be conservative.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::PathBundle;
use crate::error::{McsError, Result};
use crate::market::VasicekMarket;
use crate::pde::FactorSurface;
use crate::strategy::InvestmentStrategy;

/// Rejection threshold for |z| and regression t-statistics.
pub const Z_THRESHOLD: f64 = 3.0;

/// Relative size below which a mean difference or its error is treated as rounding.
const ROUNDING_TOL: f64 = 1e-12;
const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleRow {
    pub t: f64,
    /// Grid time of the consumption sample (T − Δ for t = T).
    pub t_sample: f64,
    pub mean_c: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionTerm {
    pub name: &'static str,
    pub coef: f64,
    pub se: f64,
    pub t: f64,
}

/// OLS of c(t₂) − c(t₁) on information at t₁, with pair-clustered errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Regression {
    pub t1: f64,
    pub t2: f64,
    pub terms: Vec<RegressionTerm>,
    /// Regressors dropped as constant or collinear.
    pub dropped: Vec<&'static str>,
}

impl Regression {
    pub fn max_abs_t(&self) -> f64 {
        self.terms.iter().map(|t| t.t.abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExhaustionStats {
    /// T − Δ.
    pub t_last: f64,
    /// max over paths of X(T − Δ)/x₀.
    pub max_ratio: f64,
    pub mean_ratio: f64,
    /// 2Δ/T, the bound for constant consumption with a B_f factor.
    pub bound: f64,
    /// max over paths of |X(T)|/x₀.
    pub terminal_max: f64,
    /// max over paths of |∫c/Y − x₀|/x₀.
    pub budget_max_error: f64,
    pub budget_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolRow {
    pub t: f64,
    pub predicted_sigma: f64,
    pub realized_sigma: f64,
    /// |realized/predicted − 1|; NaN when the prediction is below 1e-8.
    pub rel_error: f64,
    /// Realized variance rate of ln c.
    pub realized_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolTable {
    pub window: usize,
    pub rows: Vec<VolRow>,
}

impl VolTable {
    pub fn max_rel_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.rel_error)
            .filter(|e| e.is_finite())
            .fold(0.0, f64::max)
    }

    pub fn max_realized_var(&self) -> f64 {
        self.rows.iter().map(|r| r.realized_var).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub c0: f64,
    pub paths: usize,
    pub rows: Vec<MartingaleRow>,
    /// Least-squares slope of ln(mean c/c₀) against time.
    pub realized_drift: f64,
    pub exhaustion: ExhaustionStats,
    pub regression: Option<Regression>,
    pub vol: Option<VolTable>,
}

impl MartingaleReport {
    pub fn max_abs_z(&self) -> f64 {
        self.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max)
    }

    /// All |z| ≤ `threshold`.
    pub fn passes(&self, threshold: f64) -> bool {
        self.rows.iter().all(|r| r.z.abs() <= threshold)
    }

    pub fn row_near(&self, t: f64) -> Option<&MartingaleRow> {
        self.rows
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }
}

/// Mean and cluster-robust standard error of `values` (path order).
fn clustered_mean(bundle: &PathBundle, values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut totals: Vec<(f64, usize)> = Vec::new();
    let mut last = usize::MAX;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (path, v) in values.enumerate() {
        let g = bundle.cluster(path);
        if g != last {
            totals.push((0.0, 0));
            last = g;
        }
        let t = totals.last_mut().expect("cluster pushed");
        t.0 += v;
        t.1 += 1;
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let g = totals.len();
    if g < 2 {
        return (mean, f64::NAN);
    }
    let ss: f64 = totals.iter().map(|(s, k)| (s - *k as f64 * mean).powi(2)).sum();
    let var = ss / (n as f64 * n as f64) * g as f64 / (g as f64 - 1.0);
    (mean, var.sqrt())
}

/// z-statistics of mean consumption against c(0) at each report time.
pub fn martingale_test(bundle: &PathBundle) -> MartingaleReport {
    let c0 = bundle.c0;
    let mut rows = Vec::with_capacity(bundle.reports.len());
    for (j, rep) in bundle.reports.iter().enumerate() {
        let (mean_d, se) = clustered_mean(bundle, bundle.column(j).map(|p| p.c - c0));
        let floor = ROUNDING_TOL * c0.abs();
        let z = if se > floor {
            mean_d / se
        } else if mean_d.abs() <= floor {
            0.0
        } else {
            mean_d.signum() * f64::INFINITY
        };
        rows.push(MartingaleRow {
            t: rep.t,
            t_sample: bundle.sample_time(j),
            mean_c: c0 + mean_d,
            se,
            z,
        });
    }
    let (num, den) = rows.iter().filter(|r| r.t_sample > 0.0).fold((0.0, 0.0), |(n, d), r| {
        (n + r.t_sample * (r.mean_c / c0).ln(), d + r.t_sample * r.t_sample)
    });
    MartingaleReport {
        c0,
        paths: bundle.paths(),
        rows,
        realized_drift: if den > 0.0 { num / den } else { 0.0 },
        exhaustion: exhaustion_check(bundle),
        regression: conditional_regression(bundle),
        vol: None,
    }
}

/// Regresses c(t₂) − c(t₁) on [1, c(t₁), W₁(t₁), ln X(t₁), ln(c(t₁)/c(t₀))] for
/// the two middle report times.
fn conditional_regression(bundle: &PathBundle) -> Option<Regression> {
    let n_rep = bundle.reports.len();
    let paths = bundle.paths();
    if n_rep < 2 || paths < 10 {
        return None;
    }
    let j1 = (n_rep - 1) / 2;
    let j2 = j1 + 1;
    let names = ["const", "c(t1)", "W1(t1)", "ln X(t1)", "ln c(t1)/c(t0)"];
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(paths); names.len()];
    let mut y = Vec::with_capacity(paths);
    for p in 0..paths {
        let a = bundle.point(p, j1);
        let b = bundle.point(p, j2);
        let prev = if j1 == 0 { bundle.c0 } else { bundle.point(p, j1 - 1).c };
        let row = [1.0, a.c, a.w1, a.x.ln(), (a.c / prev).ln()];
        for (col, v) in cols.iter_mut().zip(row) {
            col.push(v);
        }
        y.push(b.c - a.c);
    }
    if cols.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
        return None;
    }

    // Gram–Schmidt selection of linearly independent regressors.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (k, col) in cols.iter().enumerate() {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = col.clone();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 > 0.0 && norm > COLLINEAR_TOL * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
            kept.push(k);
        } else {
            dropped.push(names[k]);
        }
    }

    let p = kept.len();
    let x = DMatrix::from_fn(paths, p, |i, j| cols[kept[j]][i]);
    let yv = DVector::from_vec(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let inv = xtx.try_inverse()?;
    let beta = &inv * xty;
    let resid = &yv - &x * &beta;

    let mut meat = DMatrix::<f64>::zeros(p, p);
    let mut score = DVector::<f64>::zeros(p);
    let mut groups = 0usize;
    let mut last = usize::MAX;
    for i in 0..paths {
        let g = bundle.cluster(i);
        if g != last && i > 0 {
            meat += &score * score.transpose();
            score.fill(0.0);
        }
        if g != last {
            groups += 1;
            last = g;
        }
        for j in 0..p {
            score[j] += x[(i, j)] * resid[i];
        }
    }
    meat += &score * score.transpose();
    let adj = if groups > 1 {
        groups as f64 / (groups as f64 - 1.0)
    } else {
        1.0
    };
    let cov = &inv * meat * &inv * adj;
    let terms = (0..p)
        .map(|j| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let coef = beta[j];
            let t = if se > 0.0 {
                coef / se
            } else if coef.abs() <= 1e-14 * (1.0 + bundle.c0) {
                0.0
            } else {
                coef.signum() * f64::INFINITY
            };
            RegressionTerm {
                name: names[kept[j]],
                coef,
                se,
                t,
            }
        })
        .collect();
    Some(Regression {
        t1: bundle.reports[j1].t,
        t2: bundle.reports[j2].t,
        terms,
        dropped,
    })
}

/// Wealth left at the last consumption time and the budget identity ∫c/Y = x₀.
pub fn exhaustion_check(bundle: &PathBundle) -> ExhaustionStats {
    let n = bundle.paths() as f64;
    let x0 = bundle.x0;
    let ratios = bundle.x_last.iter().map(|x| x / x0);
    let (max_ratio, sum) = ratios.fold((f64::NEG_INFINITY, 0.0), |(m, s), r| (m.max(r), s + r));
    ExhaustionStats {
        t_last: bundle.horizon - bundle.dt(),
        max_ratio,
        mean_ratio: sum / n,
        bound: 2.0 / bundle.steps as f64,
        terminal_max: bundle.x_terminal.iter().map(|x| x.abs() / x0).fold(0.0, f64::max),
        budget_max_error: bundle.budget.iter().map(|b| (b - x0).abs() / x0).fold(0.0, f64::max),
        budget_mean: bundle.budget.iter().sum::<f64>() / n / x0,
    }
}

/// Realized variance rate of ln c over each report window against the
/// prediction `σ_c² = (E − D_a σ_r)² + (π₂σ₂₂)²`, with `E = σ_r D_X`.
pub fn vol_check(
    bundle: &PathBundle,
    market: &VasicekMarket,
    pi: &InvestmentStrategy,
    surface: &FactorSurface,
) -> Result<VolTable> {
    if !bundle.stochastic_rate {
        return Err(McsError::Config("vol_check needs a Vasicek-regime bundle".into()));
    }
    let state = pi.as_state()?;
    let span = bundle.qv_window as f64 * bundle.dt();
    let mut rows = Vec::new();
    for (j, rep) in bundle.reports.iter().enumerate() {
        if bundle.point(0, j).qv.is_nan() {
            continue;
        }
        let mut pred = 0.0;
        let mut real = 0.0;
        for pt in bundle.column(j) {
            let p = state.eval(rep.t, pt.r);
            let e = market.rate_exposure(rep.t, pt.r, p);
            let da = surface.duration(rep.t, pt.r);
            let hedge_gap = e - da * market.sigma_r;
            let stock = p[1] * market.sigma22;
            pred += hedge_gap * hedge_gap + stock * stock;
            real += pt.qv / span;
        }
        let n = bundle.paths() as f64;
        let (pred, real) = (pred / n, real / n);
        let (ps, rs) = (pred.sqrt(), real.sqrt());
        rows.push(VolRow {
            t: rep.t,
            predicted_sigma: ps,
            realized_sigma: rs,
            rel_error: if ps > 1e-8 { (rs / ps - 1.0).abs() } else { f64::NAN },
            realized_var: real,
        });
    }
    Ok(VolTable {
        window: bundle.qv_window,
        rows,
    })
}
