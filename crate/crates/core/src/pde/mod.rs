//! Finite-difference solvers for the wealth-to-consumption surface a(t, r)
//! in the Vasicek market.
//!
//! Both equations are solved backwards in time to-maturity τ = T − t as
//! `a_τ = conv·a_r + diff·a_rr − k·a + 1` with `a(T, ·) = 0`:
//!
//! * annuity certain ā: `conv = μ + λ₁σ_r`, `k = r`;
//! * martingale surface a: `conv = μ − σ_r E + σ_r² D_a`,
//!   `k = r + λ₁E + π₂λ₂σ₂₂`, with `E = π₁σ₁₁ + π₂σ₂₁` the wealth loading
//!   on W₁ (σ_r·D_X) and `D_a = −a_r/a` lagged and Picard-iterated.
//!
//! The scheme is Crank–Nicolson after an analytic first step
//! `a ≈ τ − kτ²/2` (which avoids the 0/0 in D_a at τ = 0) and two damped
//! implicit Euler steps. Each damped step runs as Richardson-extrapolated
//! substeps so the start keeps second order relative to a ≈ τ.

mod tridiag;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use tridiag::solve_tridiagonal;

use crate::annuity::AnnuityAnsatz;
use crate::error::{McsError, Result};
use crate::field::Field2D;
use crate::market::VasicekMarket;
use crate::strategy::{InvestmentStrategy, StateFn, StateStrategy};

pub const PICARD_TOL: f64 = 1e-10;
pub const PICARD_MAX_ITER: usize = 50;
/// Half-width of the default r-domain in stationary standard deviations.
pub const DOMAIN_STDS: f64 = 6.0;
/// Smallest half-width of the default r-domain (keeps σ_r = 0 grids valid).
pub const MIN_DOMAIN_HALF_WIDTH: f64 = 1e-3;

/// Uniform (t, r) grid. Both r-edges use one-sided second-order stencils
/// (an artificial boundary: the rate itself is unbounded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub horizon: f64,
    pub n_t: usize,
    pub n_r: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl Grid2D {
    pub fn new(horizon: f64, n_t: usize, n_r: usize, r_min: f64, r_max: f64) -> Result<Self> {
        let g = Self {
            horizon,
            n_t,
            n_r,
            r_min,
            r_max,
        };
        g.validate()?;
        Ok(g)
    }

    /// `r₀ ± 6` stationary standard deviations (at least ±[`MIN_DOMAIN_HALF_WIDTH`]).
    pub fn around(market: &VasicekMarket, n_t: usize, n_r: usize) -> Result<Self> {
        let w = (DOMAIN_STDS * market.stationary_std()).max(MIN_DOMAIN_HALF_WIDTH);
        Self::new(market.horizon, n_t, n_r, market.r0 - w, market.r0 + w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t < 3 || self.n_r < 3 {
            return Err(McsError::InvalidGrid(format!(
                "PDE grid needs at least 3 nodes per axis, got {} x {}",
                self.n_t, self.n_r
            )));
        }
        if !(self.r_min < self.r_max) || !self.r_min.is_finite() || !self.r_max.is_finite() {
            return Err(McsError::InvalidGrid(format!(
                "degenerate rate range [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(McsError::InvalidGrid(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Doubles the number of intervals on both axes `k` times.
    pub fn refined(&self, k: u32) -> Self {
        let f = 1usize << k;
        Self {
            n_t: (self.n_t - 1) * f + 1,
            n_r: (self.n_r - 1) * f + 1,
            ..*self
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.n_t - 1) as f64
    }

    pub fn dr(&self) -> f64 {
        (self.r_max - self.r_min) / (self.n_r - 1) as f64
    }

    pub fn t_at(&self, i: usize) -> f64 {
        if i == self.n_t - 1 {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn r_at(&self, j: usize) -> f64 {
        self.r_min + j as f64 * self.dr()
    }

    fn check_market(&self, market: &VasicekMarket) -> Result<()> {
        market.validate()?;
        if (self.horizon - market.horizon).abs() > 1e-12 * market.horizon.max(1.0) {
            return Err(McsError::InvalidGrid(format!(
                "grid horizon {} differs from market horizon {}",
                self.horizon, market.horizon
            )));
        }
        if !(self.r_min < market.r0 && market.r0 < self.r_max) {
            return Err(McsError::InvalidGrid(format!(
                "r0 = {} outside the open grid range ({}, {})",
                market.r0, self.r_min, self.r_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Pde,
    Ansatz,
    ClosedFormAnnuity,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Pde => "pde",
            Provenance::Ansatz => "ansatz",
            Provenance::ClosedFormAnnuity => "closed-form-annuity",
        }
    }
}

/// A wealth-to-consumption surface a(t, r) in years.
#[derive(Debug, Clone)]
pub struct FactorSurface {
    pub field: Arc<Field2D>,
    pub provenance: Provenance,
}

impl FactorSurface {
    pub fn new(field: Field2D, provenance: Provenance) -> Self {
        Self {
            field: Arc::new(field),
            provenance,
        }
    }

    pub fn grid(&self) -> Grid2D {
        let f = &self.field;
        Grid2D {
            horizon: f.horizon(),
            n_t: f.n_t(),
            n_r: f.n_r(),
            r_min: f.r_min(),
            r_max: f.r_max(),
        }
    }

    pub fn eval(&self, t: f64, r: f64) -> f64 {
        self.field.eval(t, r)
    }

    /// D_a = −a_r/a from the interpolant.
    pub fn duration(&self, t: f64, r: f64) -> f64 {
        let (a, ar) = self.field.eval_with_dr(t, r);
        -ar / a
    }

    /// D_a at a node from the difference stencils (zero on the terminal row).
    pub fn node_duration(&self, i: usize, j: usize) -> f64 {
        let a = self.field.at(i, j);
        if i == self.field.n_t() - 1 || a == 0.0 {
            0.0
        } else {
            -self.field.d_dr(i, j) / a
        }
    }

    /// Largest |relative difference| over nodes with t < T.
    pub fn max_relative_error(&self, other: &FactorSurface) -> Result<f64> {
        if self.grid() != other.grid() {
            return Err(McsError::InvalidGrid("surfaces live on different grids".into()));
        }
        let f = &self.field;
        let mut worst = 0.0f64;
        for i in 0..f.n_t() - 1 {
            for j in 0..f.n_r() {
                let b = other.field.at(i, j);
                worst = worst.max(((f.at(i, j) - b) / b).abs());
            }
        }
        Ok(worst)
    }
}

/// Closed-form ā tabulated on `grid` (quadrature of the affine bond price).
pub fn annuity_certain_surface(market: &VasicekMarket, grid: &Grid2D) -> Result<FactorSurface> {
    grid.validate()?;
    market.validate()?;
    let field = Field2D::from_fn(grid.horizon, grid.n_t, grid.r_min, grid.r_max, grid.n_r, |t, r| {
        if t >= grid.horizon - 1e-12 * grid.horizon {
            0.0
        } else {
            market.annuity_certain(t, r)
        }
    })?;
    Ok(FactorSurface::new(field, Provenance::ClosedFormAnnuity))
}

/// Tabulates an ansatz surface on `grid`.
pub fn ansatz_surface(ansatz: &AnnuityAnsatz, grid: &Grid2D) -> Result<FactorSurface> {
    grid.validate()?;
    let t_max = grid.horizon;
    let field = Field2D::from_fn(grid.horizon, grid.n_t, grid.r_min, grid.r_max, grid.n_r, |t, r| {
        ansatz.surface_raw(t.min(t_max), r, t_max, 1e-12)
    })?;
    Ok(FactorSurface::new(field, Provenance::Ansatz))
}

/// Per-node coefficients of `a_τ = conv·a_r + diff·a_rr − k·a + 1`.
struct Coefficients {
    conv: Vec<f64>,
    diff: f64,
    k: Vec<f64>,
}

/// Strategy and market terms at one time level: `(base convection, k)`.
fn level_terms(market: &VasicekMarket, pi: &StateStrategy, grid: &Grid2D, t: f64) -> (Vec<f64>, Vec<f64>) {
    let mut conv = Vec::with_capacity(grid.n_r);
    let mut k = Vec::with_capacity(grid.n_r);
    for j in 0..grid.n_r {
        let r = grid.r_at(j);
        let p = pi.eval(t, r);
        let e = market.rate_exposure(t, r, p);
        conv.push(market.mu(r) - market.sigma_r * e);
        k.push(r + market.lambda1 * e + p[1] * market.lambda2 * market.sigma22);
    }
    (conv, k)
}

fn annuity_level(market: &VasicekMarket, grid: &Grid2D) -> Coefficients {
    Coefficients {
        conv: (0..grid.n_r).map(|j| market.mu_q(grid.r_at(j))).collect(),
        diff: 0.5 * market.sigma_r * market.sigma_r,
        k: (0..grid.n_r).map(|j| grid.r_at(j)).collect(),
    }
}

/// First r-derivative with the boundary stencils of the solver.
fn d_dr(a: &[f64], h: f64, j: usize) -> f64 {
    let n = a.len();
    if j == 0 {
        (-3.0 * a[0] + 4.0 * a[1] - a[2]) / (2.0 * h)
    } else if j == n - 1 {
        (3.0 * a[n - 1] - 4.0 * a[n - 2] + a[n - 3]) / (2.0 * h)
    } else {
        (a[j + 1] - a[j - 1]) / (2.0 * h)
    }
}

/// A row of the discrete operator: weights on nodes `start..start + 4`.
#[derive(Clone, Copy)]
struct Row {
    start: usize,
    w: [f64; 4],
}

/// Interior rows use the central three-point stencils. Edge rows use the
/// one-sided first derivative and a linearly extrapolated second derivative,
/// `a_rr(0) = 2a_rr(1) − a_rr(2)`, which reaches four nodes.
fn operator_rows(c: &Coefficients, h: f64) -> Vec<Row> {
    let n = c.k.len();
    let wide = n >= 5;
    (0..n)
        .map(|j| {
            let (b, d, k) = (c.conv[j] / (2.0 * h), c.diff / (h * h), c.k[j]);
            if j == 0 {
                if wide {
                    Row {
                        start: 0,
                        w: [-3.0 * b + 2.0 * d - k, 4.0 * b - 5.0 * d, -b + 4.0 * d, -d],
                    }
                } else {
                    Row {
                        start: 0,
                        w: [-3.0 * b + d - k, 4.0 * b - 2.0 * d, -b + d, 0.0],
                    }
                }
            } else if j == n - 1 {
                if wide {
                    Row {
                        start: n - 4,
                        w: [-d, b + 4.0 * d, -4.0 * b - 5.0 * d, 3.0 * b + 2.0 * d - k],
                    }
                } else {
                    Row {
                        start: n - 3,
                        w: [b + d, -4.0 * b - 2.0 * d, 3.0 * b + d - k, 0.0],
                    }
                }
            } else {
                Row {
                    start: j - 1,
                    w: [-b + d, -2.0 * d - k, b + d, 0.0],
                }
            }
        })
        .collect()
}

fn apply(rows: &[Row], a: &[f64]) -> Vec<f64> {
    rows.iter()
        .map(|row| {
            row.w
                .iter()
                .enumerate()
                .filter(|(m, _)| row.start + m < a.len())
                .map(|(m, w)| w * a[row.start + m])
                .sum()
        })
        .collect()
}

/// Solves `(I − w L) x = rhs`, eliminating the extra edge entries against
/// the neighbouring interior rows so the system stays tridiagonal.
fn implicit_solve(rows: &[Row], w: f64, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rows.len();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut b = rhs.to_vec();
    for j in 1..n - 1 {
        lower[j] = -w * rows[j].w[0];
        diag[j] = 1.0 - w * rows[j].w[1];
        upper[j] = -w * rows[j].w[2];
    }
    // dense edge rows over columns start..start + 4
    let edge = |row: &Row, j: usize| {
        let mut m = row.w.map(|x| -w * x);
        m[j - row.start] += 1.0;
        m
    };
    let tiny = |x: f64, scale: f64| x.abs() <= 1e-14 * scale.abs();

    // bottom: columns 0..4
    let mut m = edge(&rows[0], 0);
    let mut b0 = b[0];
    if m[3] != 0.0 {
        if tiny(upper[2], diag[2]) {
            return None;
        }
        let f = m[3] / upper[2];
        m[1] -= f * lower[2];
        m[2] -= f * diag[2];
        b0 -= f * b[2];
    }
    if m[2] != 0.0 {
        if tiny(upper[1], diag[1]) {
            return None;
        }
        let f = m[2] / upper[1];
        m[0] -= f * lower[1];
        m[1] -= f * diag[1];
        b0 -= f * b[1];
    }
    diag[0] = m[0];
    upper[0] = m[1];
    b[0] = b0;

    // top: columns n−4..n (or n−3..n on narrow grids)
    let last = n - 1;
    let row = &rows[last];
    let mut m = edge(row, last);
    let mut bl = b[last];
    let wide = row.start + 4 == n;
    let (c_far, c_mid) = if wide { (0, 1) } else { (usize::MAX, 0) };
    if wide && m[c_far] != 0.0 {
        let r = last - 2;
        if tiny(lower[r], diag[r]) {
            return None;
        }
        let f = m[c_far] / lower[r];
        m[1] -= f * diag[r];
        m[2] -= f * upper[r];
        bl -= f * b[r];
    }
    if m[c_mid] != 0.0 {
        let r = last - 1;
        if tiny(lower[r], diag[r]) {
            return None;
        }
        let f = m[c_mid] / lower[r];
        m[c_mid + 1] -= f * diag[r];
        m[c_mid + 2] -= f * upper[r];
        bl -= f * b[r];
    }
    lower[last] = m[c_mid + 1];
    diag[last] = m[c_mid + 2];
    b[last] = bl;
    solve_tridiagonal(&lower, &diag, &upper, &b)
}

fn positivity(a: &[f64], step: usize) -> Result<()> {
    if let Some((j, &v)) = a.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(McsError::PositivityLoss {
            step,
            r_index: j,
            min_value: v,
            slice: a.to_vec(),
        });
    }
    Ok(())
}

/// Analytic first step from the expansion `a ≈ τ − kτ²/2` at τ = 0.
fn terminal_expansion(at_first: &Coefficients, tau: f64) -> Vec<f64> {
    at_first.k.iter().map(|k| tau - 0.5 * k * tau * tau).collect()
}

/// One θ-step from `a_old` (at `t + dτ`) to `t`, Picard-iterating the
/// lagged coefficients when `nonlinear`.
#[allow(clippy::too_many_arguments)]
fn theta_step<C>(
    coeffs: &mut C,
    a_old: &[f64],
    t: f64,
    dtau: f64,
    theta: f64,
    h: f64,
    nonlinear: bool,
    step: usize,
) -> Result<Vec<f64>>
where
    C: FnMut(f64, Option<&[f64]>) -> Coefficients,
{
    let mut rhs: Vec<f64> = a_old.iter().map(|v| v + dtau).collect();
    if theta < 1.0 {
        let old = operator_rows(&coeffs(t + dtau, Some(a_old)), h);
        for (r, l) in rhs.iter_mut().zip(apply(&old, a_old)) {
            *r += (1.0 - theta) * dtau * l;
        }
    }
    let mut iterate = a_old.to_vec();
    let mut change = f64::INFINITY;
    for _ in 0..PICARD_MAX_ITER {
        let rows = operator_rows(&coeffs(t, Some(&iterate)), h);
        let next = implicit_solve(&rows, theta * dtau, &rhs)
            .ok_or_else(|| McsError::InvalidGrid(format!("singular implicit system at time step {step}")))?;
        let scale = next.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        change = next.iter().zip(&iterate).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
        iterate = next;
        if !nonlinear || change <= PICARD_TOL {
            return Ok(iterate);
        }
    }
    Err(McsError::NonlinearIteration { step, residual: change })
}

/// Number of damped implicit steps after the analytic one.
const RANNACHER_STEPS: usize = 2;
/// Each damped step is split into this many extrapolated substeps: the start
/// error is not smooth in t, and α_c differentiates it.
const RANNACHER_SUBSTEPS: usize = 8;

/// The backward march shared by both equations.
fn march<C>(grid: &Grid2D, nonlinear: bool, mut coeffs: C) -> Result<Field2D>
where
    C: FnMut(f64, Option<&[f64]>) -> Coefficients,
{
    grid.validate()?;
    let (nt, nr) = (grid.n_t, grid.n_r);
    let (dtau, h) = (grid.dt(), grid.dr());
    let mut values = vec![0.0; nt * nr];

    let mut a = terminal_expansion(&coeffs(grid.t_at(nt - 2), None), dtau);
    positivity(&a, 1)?;
    values[(nt - 2) * nr..(nt - 1) * nr].copy_from_slice(&a);

    for i in (0..nt - 2).rev() {
        let step = nt - 1 - i;
        let t = grid.t_at(i);
        a = if step <= 1 + RANNACHER_STEPS {
            // implicit Euler substeps, each extrapolated from two half steps
            let sub = dtau / RANNACHER_SUBSTEPS as f64;
            let mut b = a.clone();
            for s in (0..RANNACHER_SUBSTEPS).rev() {
                let ts = t + s as f64 * sub;
                let full = theta_step(&mut coeffs, &b, ts, sub, 1.0, h, nonlinear, step)?;
                let half = theta_step(&mut coeffs, &b, ts + 0.5 * sub, 0.5 * sub, 1.0, h, nonlinear, step)?;
                let twice = theta_step(&mut coeffs, &half, ts, 0.5 * sub, 1.0, h, nonlinear, step)?;
                b = twice.iter().zip(&full).map(|(x, y)| 2.0 * x - y).collect();
            }
            b
        } else {
            theta_step(&mut coeffs, &a, t, dtau, 0.5, h, nonlinear, step)?
        };
        positivity(&a, step)?;
        values[i * nr..(i + 1) * nr].copy_from_slice(&a);
    }
    Field2D::new(grid.horizon, nt, grid.r_min, grid.r_max, nr, values)
}

/// Linear Feynman–Kac equation for the annuity certain ā.
pub fn solve_annuity_pde(market: &VasicekMarket, grid: &Grid2D) -> Result<FactorSurface> {
    grid.validate()?;
    grid.check_market(market)?;
    let level = annuity_level(market, grid);
    let field = march(grid, false, |_, _| Coefficients {
        conv: level.conv.clone(),
        diff: level.diff,
        k: level.k.clone(),
    })?;
    Ok(FactorSurface::new(field, Provenance::Pde))
}

/// Semilinear equation for the surface making c = X/a a martingale under `pi`.
pub fn solve_mcs_pde(market: &VasicekMarket, pi: &InvestmentStrategy, grid: &Grid2D) -> Result<FactorSurface> {
    grid.validate()?;
    grid.check_market(market)?;
    let pi = pi.as_state()?;
    let s2 = market.sigma_r * market.sigma_r;
    let h = grid.dr();
    let mut cache: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let field = march(grid, s2 > 0.0, |t, a| {
        let (base, k) = match &cache {
            Some((ct, b, k)) if *ct == t => (b.clone(), k.clone()),
            _ => {
                let (b, k) = level_terms(market, &pi, grid, t);
                cache = Some((t, b.clone(), k.clone()));
                (b, k)
            }
        };
        let conv = match a {
            Some(a) if s2 > 0.0 => base
                .iter()
                .enumerate()
                .map(|(j, b)| b - s2 * d_dr(a, h, j) / a[j])
                .collect(),
            _ => base,
        };
        Coefficients {
            conv,
            diff: 0.5 * s2,
            k,
        }
    })?;
    Ok(FactorSurface::new(field, Provenance::Pde))
}

/// Bond-only strategy replicating a fixed consumption stream:
/// `π₁ = D_ā σ_r/σ₁₁`, `π₂ = 0`.
pub fn hedge_strategy(market: &VasicekMarket, annuity: &FactorSurface) -> Result<InvestmentStrategy> {
    let f = &annuity.field;
    let (nt, nr) = (f.n_t(), f.n_r());
    let mut values = vec![0.0; nt * nr];
    for i in 0..nt {
        let t = f.t_at(i);
        for j in 0..nr {
            let r = f.r_at(j);
            let s11 = market.sigma11(t, r);
            if i == nt - 1 {
                continue;
            }
            if s11 == 0.0 {
                return Err(McsError::Spanning { t, r });
            }
            values[i * nr + j] = annuity.node_duration(i, j) * market.sigma_r / s11;
        }
    }
    // terminal row: D_ā and σ₁₁ may both vanish, so extrapolate the ratio
    for j in 0..nr {
        let r = f.r_at(j);
        let s11 = market.sigma11(f.horizon(), r);
        values[(nt - 1) * nr + j] = match (s11 == 0.0, nt >= 3) {
            (false, _) => 0.0,
            (true, true) => 2.0 * values[(nt - 2) * nr + j] - values[(nt - 3) * nr + j],
            (true, false) => values[(nt - 2) * nr + j],
        };
    }
    let pi1 = Field2D::new(f.horizon(), nt, f.r_min(), f.r_max(), nr, values)?;
    Ok(InvestmentStrategy::State(StateStrategy {
        bond: StateFn::Grid(Arc::new(pi1)),
        stock: StateFn::Time(crate::curve::RateCurve::constant(0.0)),
    }))
}

/// Drift rate α_c of c = X/a at an interior node, from difference quotients.
pub fn alpha_c_residual(
    surface: &FactorSurface,
    market: &VasicekMarket,
    pi: &InvestmentStrategy,
    i: usize,
    j: usize,
) -> Result<f64> {
    let f = &surface.field;
    if i == 0 || j == 0 || i + 1 >= f.n_t() || j + 1 >= f.n_r() {
        return Err(McsError::Domain(format!("node ({i}, {j}) is not interior")));
    }
    let pi = pi.as_state()?;
    let (t, r) = (f.t_at(i), f.r_at(j));
    let a = f.at(i, j);
    let (a_t, a_r, a_rr) = (d_dt_fourth_order(f, i, j), f.d_dr(i, j), f.d_drr(i, j));
    Ok(-generator_residual(market, &pi, t, r, a, a_t, a_r, a_rr) / a)
}

/// Five-point ∂/∂t (shifted stencils at the ends). Near T the surface is
/// O(T − t), so a second-order quotient would dominate α_c = −residual/a.
fn d_dt_fourth_order(f: &Field2D, i: usize, j: usize) -> f64 {
    let n = f.n_t();
    if n < 5 {
        return f.d_dt(i, j);
    }
    let start = i.saturating_sub(2).min(n - 5);
    let offsets: Vec<f64> = (0..5).map(|m| (start + m) as f64 - i as f64).collect();
    let w = first_derivative_weights(&offsets);
    (0..5).map(|m| w[m] * f.at(start + m, j)).sum::<f64>() / f.dt()
}

/// Weights of the exact-for-quartics first derivative at 0 on the given offsets.
fn first_derivative_weights(offsets: &[f64]) -> Vec<f64> {
    let n = offsets.len();
    let v = nalgebra::DMatrix::from_fn(n, n, |p, m| offsets[m].powi(p as i32));
    let mut rhs = nalgebra::DVector::zeros(n);
    rhs[1] = 1.0;
    v.lu().solve(&rhs).expect("distinct offsets").iter().copied().collect()
}

/// `a_t + μa_r + σ_r²a_rr/2 + 1 − a_r(σ_r E − σ_r² D_a) − a k`.
#[allow(clippy::too_many_arguments)]
fn generator_residual(
    market: &VasicekMarket,
    pi: &StateStrategy,
    t: f64,
    r: f64,
    a: f64,
    a_t: f64,
    a_r: f64,
    a_rr: f64,
) -> f64 {
    let p = pi.eval(t, r);
    let e = market.rate_exposure(t, r, p);
    let s = market.sigma_r;
    let d_a = -a_r / a;
    let k = r + market.lambda1 * e + p[1] * market.lambda2 * market.sigma22;
    a_t + market.mu(r) * a_r + 0.5 * s * s * a_rr + 1.0 - a_r * (s * e - s * s * d_a) - a * k
}

/// Sup of |α_c| over interior nodes.
pub fn alpha_c_sup(surface: &FactorSurface, market: &VasicekMarket, pi: &InvestmentStrategy) -> Result<f64> {
    let f = &surface.field;
    let mut worst = 0.0f64;
    for i in 1..f.n_t() - 1 {
        for j in 1..f.n_r() - 1 {
            worst = worst.max(alpha_c_residual(surface, market, pi, i, j)?.abs());
        }
    }
    Ok(worst)
}

/// Step in r for the difference quotients of [`simplified_pde_residual`].
pub const ANSATZ_DR: f64 = 1e-3;

/// Residual of the PDE rewritten under the ansatz `a = B_{rg+h}`:
/// `−H₁ − H₂ + a_r[μ − σ_r E + σ_r² D_a] + a_rr σ_r²/2 − a[λ₁E + π₂λ₂σ₂₂ − h(t,t)]`.
pub fn simplified_pde_residual(
    ansatz: &AnnuityAnsatz,
    market: &VasicekMarket,
    pi: &InvestmentStrategy,
    t: f64,
    r: f64,
) -> Result<f64> {
    simplified_pde_residual_with_step(ansatz, market, pi, t, r, ANSATZ_DR)
}

pub fn simplified_pde_residual_with_step(
    ansatz: &AnnuityAnsatz,
    market: &VasicekMarket,
    pi: &InvestmentStrategy,
    t: f64,
    r: f64,
    dr: f64,
) -> Result<f64> {
    market.check_time(t)?;
    let pi = pi.as_state()?;
    let horizon = market.horizon;
    let tol = 1e-14;
    let a = ansatz.surface_raw(t, r, horizon, tol);
    let up = ansatz.surface_raw(t, r + dr, horizon, tol);
    let dn = ansatz.surface_raw(t, r - dr, horizon, tol);
    let a_r = (up - dn) / (2.0 * dr);
    let a_rr = (up - 2.0 * a + dn) / (dr * dr);
    let terms = ansatz.leibniz_terms(t, r, horizon)?;
    let p = pi.eval(t, r);
    let e = market.rate_exposure(t, r, p);
    let s = market.sigma_r;
    let d_a = if a > 0.0 { -a_r / a } else { 0.0 };
    Ok(
        -terms.h1 - terms.h2 + a_r * (market.mu(r) - s * e + s * s * d_a) + 0.5 * s * s * a_rr
            - a * (market.lambda1 * e + p[1] * market.lambda2 * market.sigma22 - ansatz.h.value(t, t)),
    )
}

/// One level of a grid-refinement study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub n_t: usize,
    pub n_r: usize,
    /// Max relative error against the reference at nodes with t < T.
    pub error: f64,
    /// Previous level's error over this one; NaN on the first level.
    pub ratio: f64,
}

fn with_ratios(levels: Vec<(Grid2D, f64)>) -> Vec<RefinementRow> {
    let mut rows: Vec<RefinementRow> = Vec::with_capacity(levels.len());
    for (g, error) in levels {
        let ratio = rows.last().map_or(f64::NAN, |p| p.error / error);
        rows.push(RefinementRow {
            n_t: g.n_t,
            n_r: g.n_r,
            error,
            ratio,
        });
    }
    rows
}

/// Solves the annuity-hedge configuration on `base` and `doublings`
/// refinements of it, measuring each solution against the closed-form ā.
///
/// Under the hedge the semilinear equation reduces to the Feynman–Kac
/// equation for ā, so the error is pure discretization error.
pub fn hedge_refinement(market: &VasicekMarket, base: &Grid2D, doublings: u32) -> Result<Vec<RefinementRow>> {
    let mut levels = Vec::new();
    for k in 0..=doublings {
        let grid = base.refined(k);
        let exact = annuity_certain_surface(market, &grid)?;
        let pi = hedge_strategy(market, &exact)?;
        let solved = solve_mcs_pde(market, &pi, &grid)?;
        levels.push((grid, solved.max_relative_error(&exact)?));
    }
    Ok(with_ratios(levels))
}

/// Self-convergence of [`solve_mcs_pde`]: each level is compared with the
/// next finer one at the coarse nodes, so `doublings + 1` solves give
/// `doublings` rows.
pub fn mcs_refinement(
    market: &VasicekMarket,
    pi: &InvestmentStrategy,
    base: &Grid2D,
    doublings: u32,
) -> Result<Vec<RefinementRow>> {
    let mut prev: Option<(Grid2D, FactorSurface)> = None;
    let mut levels = Vec::new();
    for k in 0..=doublings {
        let grid = base.refined(k);
        let fine = solve_mcs_pde(market, pi, &grid)?;
        if let Some((g, coarse)) = prev.take() {
            let mut worst = 0.0f64;
            for i in 0..g.n_t - 1 {
                for j in 0..g.n_r {
                    let b = fine.field.at(2 * i, 2 * j);
                    worst = worst.max(((coarse.field.at(i, j) - b) / b).abs());
                }
            }
            levels.push((g, worst));
        }
        prev = Some((grid, fine));
    }
    Ok(with_ratios(levels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annuity::KernelSpec;
    use crate::curve::RateCurve;
    use crate::market::RateVolFn;

    fn vasicek(lambda1: f64) -> VasicekMarket {
        VasicekMarket {
            kappa: 0.5,
            theta: 0.03,
            sigma_r: 0.01,
            r0: 0.03,
            lambda1,
            lambda2: 0.3,
            sigma11: RateVolFn::VasicekBond { maturity: 20.0 },
            sigma21: RateVolFn::Constant { value: 0.02 },
            sigma22: 0.18,
            horizon: 20.0,
        }
    }

    #[test]
    fn annuity_pde_matches_closed_form() {
        let m = vasicek(0.1);
        let g = Grid2D::around(&m, 101, 101).unwrap();
        let pde = solve_annuity_pde(&m, &g).unwrap();
        let exact = annuity_certain_surface(&m, &g).unwrap();
        let err = pde.max_relative_error(&exact).unwrap();
        assert!(err < 2e-3, "{err}");
    }

    #[test]
    fn single_step_is_dt() {
        let mut m = vasicek(0.1);
        m.horizon = 1e-3;
        m.sigma11 = RateVolFn::Constant { value: 0.05 };
        let g = Grid2D::around(&m, 3, 21).unwrap();
        let s = solve_mcs_pde(&m, &InvestmentStrategy::constant(&[0.2, 0.5]), &g).unwrap();
        for j in 0..21 {
            assert!((s.field.at(0, j) - 1e-3).abs() < 1e-6 * 1e-3 * 100.0);
        }
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(matches!(
            Grid2D::new(1.0, 10, 10, 0.03, 0.03),
            Err(McsError::InvalidGrid(_))
        ));
    }

    #[test]
    fn zero_vol_zero_drift_is_constant_rate_annuity() {
        let m = VasicekMarket {
            kappa: 0.0,
            sigma_r: 0.0,
            lambda1: 0.0,
            ..vasicek(0.0)
        };
        let g = Grid2D::new(20.0, 201, 11, 0.0, 0.06).unwrap();
        let s = solve_annuity_pde(&m, &g).unwrap();
        for j in 0..11 {
            let r = g.r_at(j);
            let b = crate::annuity::constant_annuity(r, 20.0);
            assert!(((s.field.at(0, j) - b) / b).abs() < 1e-5, "{j}");
        }
    }

    #[test]
    fn hedge_strategy_vanishes_without_rate_risk() {
        let m = VasicekMarket {
            sigma_r: 1e-12,
            sigma11: RateVolFn::Constant { value: 0.05 },
            ..vasicek(0.0)
        };
        let g = Grid2D::around(&m, 21, 21).unwrap();
        let abar = solve_annuity_pde(&m, &g).unwrap();
        let pi = hedge_strategy(&m, &abar).unwrap().as_state().unwrap();
        assert!(pi.eval(0.0, m.r0)[0].abs() < 1e-8);
    }

    #[test]
    fn spanning_error_on_zero_bond_vol() {
        let m = VasicekMarket {
            sigma11: RateVolFn::Constant { value: 0.0 },
            ..vasicek(0.0)
        };
        let g = Grid2D::around(&m, 11, 11).unwrap();
        let abar = annuity_certain_surface(&m, &g).unwrap();
        assert!(matches!(hedge_strategy(&m, &abar), Err(McsError::Spanning { .. })));
    }

    #[test]
    fn ansatz_residual_vanishes_in_deterministic_reduction() {
        // g ≡ 1 carries r, so h is the excess return f₃ − r = π₂λ₂σ₂₂
        let m = VasicekMarket {
            kappa: 0.0,
            sigma_r: 0.0,
            lambda1: 0.0,
            ..vasicek(0.0)
        };
        let glide = RateCurve::glide(0.6, 0.1, 20.0);
        let h = RateCurve::glide(0.6 * 0.3 * 0.18, 0.1 * 0.3 * 0.18, 20.0);
        let ans = AnnuityAnsatz::from_specs(
            KernelSpec::Constant { value: 1.0 },
            KernelSpec::Curve { curve: h },
            20.0,
        )
        .unwrap();
        let pi = InvestmentStrategy::Deterministic {
            pi: vec![RateCurve::constant(0.3), glide],
        };
        let res = simplified_pde_residual(&ans, &m, &pi, 3.0, 0.02).unwrap();
        assert!(res.abs() < 1e-6, "{res}");
    }

    #[test]
    fn naive_ansatz_residual_is_nonzero_and_step_stable() {
        let m = vasicek(0.1);
        let ans = AnnuityAnsatz::from_specs(
            KernelSpec::VasicekLoading { kappa: 0.5 },
            KernelSpec::Constant { value: 0.0 },
            20.0,
        )
        .unwrap();
        let pi = InvestmentStrategy::constant(&[0.3, 0.4]);
        let coarse = simplified_pde_residual_with_step(&ans, &m, &pi, 5.0, 0.03, 2e-3).unwrap();
        let fine = simplified_pde_residual_with_step(&ans, &m, &pi, 5.0, 0.03, 1e-3).unwrap();
        assert!(fine.abs() > 1e-3, "{fine}");
        assert!(((coarse - fine) / fine).abs() < 0.01);
    }
}
