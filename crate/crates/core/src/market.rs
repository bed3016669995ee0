//! Market coefficient structures and short-rate path generation.
//!
//! Two regimes are supported: deterministic coefficients (r, α, σ as
//! functions of time, any number of risky assets) and a two-asset market
//! driven by a Vasicek short rate.
//!
//! Sign convention for the rate: `dr = κ(θ − r) dt − σ_r dW₁`. A positive
//! shock to W₁ lowers the short rate and raises bond prices, so the bond's
//! loading on W₁ (`σ₁₁`) is positive for the default zero-coupon instance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curve::{RateCurve, RateFn};
use crate::error::{McsError, Result};
use crate::quadrature;

/// Largest accepted condition number of σ(t).
pub const MAX_CONDITION: f64 = 1e12;

const HORIZON_SLACK: f64 = 1e-12;

/// Strictly increasing time grid starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(McsError::InvalidGrid(format!(
                "uniform grid needs steps >= 1 and a positive horizon (steps = {steps}, T = {horizon})"
            )));
        }
        let dt = horizon / steps as f64;
        let mut points: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        points[steps] = horizon;
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(McsError::InvalidGrid("grid needs at least two points".into()));
        }
        if points[0] != 0.0 {
            return Err(McsError::InvalidGrid(format!(
                "grid must start at 0, got {}",
                points[0]
            )));
        }
        if let Some(w) = points.windows(2).find(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(McsError::InvalidGrid(format!(
                "grid not strictly increasing near {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.points[k + 1] - self.points[k]
    }
}

/// Market with deterministic short rate, drifts and volatility matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicMarket {
    pub horizon: f64,
    pub rate: RateCurve,
    /// One drift curve per risky asset.
    #[serde(default)]
    pub drift: Vec<RateCurve>,
    /// Row i holds asset i's loadings on the n Brownian motions.
    #[serde(default)]
    pub vol: Vec<Vec<RateCurve>>,
}

impl DeterministicMarket {
    /// Money market only.
    pub fn money_market(horizon: f64, rate: RateCurve) -> Self {
        Self {
            horizon,
            rate,
            drift: Vec::new(),
            vol: Vec::new(),
        }
    }

    /// One risky asset with constant volatility and market price of risk:
    /// drift `r(t) + λσ`.
    pub fn single_asset(horizon: f64, rate: RateCurve, sigma: f64, lambda: f64) -> Self {
        let drift = match &rate {
            RateCurve::Constant { value } => RateCurve::constant(value + lambda * sigma),
            RateCurve::Affine { intercept, slope } => RateCurve::affine(intercept + lambda * sigma, *slope),
            other => other.shifted(lambda * sigma),
        };
        Self {
            horizon,
            rate,
            drift: vec![drift],
            vol: vec![vec![RateCurve::constant(sigma)]],
        }
    }

    pub fn assets(&self) -> usize {
        self.drift.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(McsError::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        let n = self.drift.len();
        if self.vol.len() != n || self.vol.iter().any(|row| row.len() != n) {
            return Err(McsError::Config(format!(
                "volatility matrix must be {n}x{n} to match {n} drift curves"
            )));
        }
        self.rate.validate()?;
        for c in self.drift.iter().chain(self.vol.iter().flatten()) {
            c.validate()?;
        }
        Ok(())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= -HORIZON_SLACK && t <= self.horizon + HORIZON_SLACK) {
            return Err(McsError::OutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    pub fn r(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.rate.rate(t))
    }

    pub fn alpha(&self, t: f64) -> Result<DVector<f64>> {
        self.check_time(t)?;
        Ok(DVector::from_iterator(
            self.drift.len(),
            self.drift.iter().map(|c| c.rate(t)),
        ))
    }

    pub fn sigma(&self, t: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        let n = self.drift.len();
        Ok(DMatrix::from_fn(n, n, |i, j| self.vol[i][j].rate(t)))
    }

    /// Market price of risk λ(t), the solution of σ(t) λ = α(t) − 1 r(t).
    pub fn lambda_of(&self, t: f64) -> Result<DVector<f64>> {
        let sigma = self.sigma(t)?;
        let excess = self.alpha(t)?.add_scalar(-self.rate.rate(t));
        solve_checked(sigma, excess, t)
    }
}

fn solve_checked(sigma: DMatrix<f64>, rhs: DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if sigma.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let sv = sigma.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(McsError::SingularVolatility { t, condition });
    }
    sigma
        .lu()
        .solve(&rhs)
        .ok_or(McsError::SingularVolatility { t, condition })
}

impl RateCurve {
    fn shifted(&self, shift: f64) -> RateCurve {
        match self {
            RateCurve::Constant { value } => RateCurve::constant(value + shift),
            RateCurve::Affine { intercept, slope } => RateCurve::affine(intercept + shift, *slope),
            RateCurve::PiecewiseConstant { breaks, values } => RateCurve::PiecewiseConstant {
                breaks: breaks.clone(),
                values: values.iter().map(|v| v + shift).collect(),
            },
            RateCurve::Tabulated { times, values } => RateCurve::Tabulated {
                times: times.clone(),
                values: values.iter().map(|v| v + shift).collect(),
            },
        }
    }
}

/// A volatility coefficient that may depend on (t, r).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RateVolFn {
    Constant {
        value: f64,
    },
    /// Rate loading of a Vasicek zero-coupon bond maturing at `maturity`:
    /// σ_r (1 − e^{−κ(M − t)}) / κ.
    VasicekBond {
        maturity: f64,
    },
}

/// Two-asset market (bond, stock) with a Vasicek short rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VasicekMarket {
    pub kappa: f64,
    pub theta: f64,
    pub sigma_r: f64,
    pub r0: f64,
    /// Market price of interest-rate risk.
    pub lambda1: f64,
    /// Market price of pure stock risk.
    pub lambda2: f64,
    pub sigma11: RateVolFn,
    pub sigma21: RateVolFn,
    pub sigma22: f64,
    pub horizon: f64,
}

impl VasicekMarket {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.kappa,
            self.theta,
            self.sigma_r,
            self.r0,
            self.lambda1,
            self.lambda2,
            self.sigma22,
            self.horizon,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !all_finite {
            return Err(McsError::Config("Vasicek parameters must be finite".into()));
        }
        if !(self.sigma_r >= 0.0) {
            return Err(McsError::Config(format!("sigma_r must be >= 0, got {}", self.sigma_r)));
        }
        if self.sigma22 == 0.0 {
            return Err(McsError::Config("sigma22 must be nonzero".into()));
        }
        if self.kappa < 0.0 {
            return Err(McsError::Config(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.horizon > 0.0) {
            return Err(McsError::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if let RateVolFn::VasicekBond { maturity } = self.sigma11 {
            if maturity < self.horizon {
                return Err(McsError::Config(format!(
                    "bond maturity {maturity} precedes the horizon {}",
                    self.horizon
                )));
            }
        }
        Ok(())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= -HORIZON_SLACK && t <= self.horizon + HORIZON_SLACK) {
            return Err(McsError::OutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Physical drift μ(t, r) = κ(θ − r).
    pub fn mu(&self, r: f64) -> f64 {
        self.kappa * (self.theta - r)
    }

    /// Risk-neutral drift μ + λ₁σ_r.
    pub fn mu_q(&self, r: f64) -> f64 {
        self.mu(r) + self.lambda1 * self.sigma_r
    }

    /// Long-run mean under the pricing measure.
    pub fn theta_q(&self) -> f64 {
        self.theta + self.lambda1 * self.sigma_r / self.kappa
    }

    /// Stationary standard deviation σ_r/√(2κ); falls back to σ_r√T when κ = 0.
    pub fn stationary_std(&self) -> f64 {
        if self.kappa > 0.0 {
            self.sigma_r / (2.0 * self.kappa).sqrt()
        } else {
            self.sigma_r * self.horizon.sqrt()
        }
    }

    fn vol_fn(&self, f: &RateVolFn, t: f64) -> f64 {
        match *f {
            RateVolFn::Constant { value } => value,
            RateVolFn::VasicekBond { maturity } => self.sigma_r * loading(self.kappa, maturity - t),
        }
    }

    pub fn sigma11(&self, t: f64, _r: f64) -> f64 {
        self.vol_fn(&self.sigma11, t)
    }

    pub fn sigma21(&self, t: f64, _r: f64) -> f64 {
        self.vol_fn(&self.sigma21, t)
    }

    /// Loading of wealth on W₁: π₁σ₁₁ + π₂σ₂₁ (equals σ_r·D_X).
    pub fn rate_exposure(&self, t: f64, r: f64, pi: [f64; 2]) -> f64 {
        pi[0] * self.sigma11(t, r) + pi[1] * self.sigma21(t, r)
    }

    /// Interest-rate sensitivity of wealth: (π₁σ₁₁ + π₂σ₂₁)/σ_r.
    pub fn wealth_duration(&self, t: f64, r: f64, pi: [f64; 2]) -> f64 {
        self.rate_exposure(t, r, pi) / self.sigma_r
    }

    /// Price at t of a zero-coupon bond paying 1 at u, given r(t) = r,
    /// under the pricing-measure drift μ + λ₁σ_r.
    pub fn zcb_price(&self, t: f64, u: f64, r: f64) -> f64 {
        let tau = u - t;
        if tau <= 0.0 {
            return 1.0;
        }
        let s2 = self.sigma_r * self.sigma_r;
        if self.kappa == 0.0 {
            // dr = λ₁σ_r dt − σ_r dW^Q
            let m = self.lambda1 * self.sigma_r;
            return (-r * tau - 0.5 * m * tau * tau + s2 * tau.powi(3) / 6.0).exp();
        }
        let k = self.kappa;
        let b = loading(k, tau);
        let ln_a = (self.theta_q() - s2 / (2.0 * k * k)) * (b - tau) - s2 * b * b / (4.0 * k);
        (ln_a - b * r).exp()
    }

    /// Closed-form value ā(t, r) of a continuous unit annuity certain on [t, T].
    pub fn annuity_certain(&self, t: f64, r: f64) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        quadrature::integrate(|u| self.zcb_price(t, u, r), t, self.horizon, 1e-13)
    }

    /// ∂ā/∂r = −∫ B(u − t) P(t, u, r) du.
    pub fn annuity_certain_dr(&self, t: f64, r: f64) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        let b = |tau: f64| {
            if self.kappa == 0.0 {
                tau
            } else {
                loading(self.kappa, tau)
            }
        };
        -quadrature::integrate(|u| b(u - t) * self.zcb_price(t, u, r), t, self.horizon, 1e-14)
    }
}

/// Either coefficient regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "kebab-case")]
pub enum Market {
    Deterministic(DeterministicMarket),
    Vasicek(VasicekMarket),
}

impl Market {
    pub fn horizon(&self) -> f64 {
        match self {
            Market::Deterministic(m) => m.horizon,
            Market::Vasicek(m) => m.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Market::Deterministic(m) => m.validate(),
            Market::Vasicek(m) => m.validate(),
        }
    }
}

/// (1 − e^{−κτ})/κ with the κ → 0 limit τ.
pub fn loading(kappa: f64, tau: f64) -> f64 {
    if kappa.abs() * tau.abs() < 1e-8 {
        tau * (1.0 - 0.5 * kappa * tau)
    } else {
        -(-kappa * tau).exp_m1() / kappa
    }
}

/// Short-rate discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateScheme {
    /// Exact Ornstein–Uhlenbeck transition.
    #[default]
    Exact,
    Euler,
}

/// Per-step coefficients of the exact OU transition
/// r' = θ + (r − θ)·decay − sd·z.
#[derive(Debug, Clone, Copy)]
pub struct OuStep {
    pub decay: f64,
    pub sd: f64,
}

impl OuStep {
    pub fn new(market: &VasicekMarket, dt: f64, scheme: RateScheme) -> Self {
        let k = market.kappa;
        let s = market.sigma_r;
        match scheme {
            RateScheme::Exact => {
                let decay = (-k * dt).exp();
                let var = if k * dt < 1e-10 {
                    s * s * dt * (1.0 - k * dt)
                } else {
                    s * s * -(-2.0 * k * dt).exp_m1() / (2.0 * k)
                };
                Self { decay, sd: var.sqrt() }
            }
            RateScheme::Euler => Self {
                decay: 1.0 - k * dt,
                sd: s * dt.sqrt(),
            },
        }
    }

    #[inline]
    pub fn advance(&self, theta: f64, r: f64, z: f64) -> f64 {
        theta + (r - theta) * self.decay - self.sd * z
    }
}

/// Generates a short-rate path on `grid` from one standard-normal draw per step.
pub fn short_rate_path(market: &VasicekMarket, grid: &TimeGrid, noise: &[f64], scheme: RateScheme) -> Result<Vec<f64>> {
    if (grid.horizon() - market.horizon).abs() > 1e-9 * market.horizon.max(1.0) {
        return Err(McsError::InvalidGrid(format!(
            "grid ends at {} but the horizon is {}",
            grid.horizon(),
            market.horizon
        )));
    }
    if noise.len() != grid.steps() {
        return Err(McsError::InvalidGrid(format!(
            "expected {} noise draws, got {}",
            grid.steps(),
            noise.len()
        )));
    }
    let mut path = Vec::with_capacity(grid.points().len());
    let mut r = market.r0;
    path.push(r);
    for (k, z) in noise.iter().enumerate() {
        let step = OuStep::new(market, grid.dt(k), scheme);
        r = step.advance(market.theta, r, *z);
        path.push(r);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn base_vasicek() -> VasicekMarket {
        VasicekMarket {
            kappa: 0.5,
            theta: 0.03,
            sigma_r: 0.01,
            r0: 0.05,
            lambda1: 0.0,
            lambda2: 0.3,
            sigma11: RateVolFn::VasicekBond { maturity: 20.0 },
            sigma21: RateVolFn::Constant { value: 0.02 },
            sigma22: 0.18,
            horizon: 1.0,
        }
    }

    #[test]
    fn zero_noise_fixed_point_is_constant() {
        // short_rate_path does not require a validated market, so σ_r = 0 is usable here
        let mut m = base_vasicek();
        m.sigma_r = 0.0;
        m.r0 = m.theta;
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let path = short_rate_path(&m, &grid, &[0.7; 50], RateScheme::Exact).unwrap();
        assert!(path.iter().all(|&r| r == m.theta));
    }

    #[test]
    fn kappa_zero_uses_brownian_limit() {
        let mut m = base_vasicek();
        m.kappa = 0.0;
        let s = OuStep::new(&m, 0.25, RateScheme::Exact);
        assert_eq!(s.decay, 1.0);
        assert!((s.sd - 0.01 * 0.5).abs() < 1e-15);
        // κ = 0 with no noise: constant path at r0
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        m.r0 = 0.03;
        let p = short_rate_path(&m, &grid, &[0.0; 4], RateScheme::Exact).unwrap();
        assert!(p.iter().all(|&r| r == 0.03));
    }

    #[test]
    fn positive_shock_lowers_rate() {
        let m = base_vasicek();
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let up = short_rate_path(&m, &grid, &[1.0], RateScheme::Exact).unwrap();
        let flat = short_rate_path(&m, &grid, &[0.0], RateScheme::Exact).unwrap();
        assert!(up[1] < flat[1]);
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::from_points(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::from_points(vec![0.1, 0.5]).is_err());
        let m = base_vasicek();
        let g = TimeGrid::uniform(2.0, 4).unwrap();
        assert!(matches!(
            short_rate_path(&m, &g, &[0.0; 4], RateScheme::Exact),
            Err(McsError::InvalidGrid(_))
        ));
    }

    #[test]
    fn ou_moments_match_closed_form() {
        let m = base_vasicek();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut noise = vec![0.0; 8];
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            for z in noise.iter_mut() {
                *z = StandardNormal.sample(&mut rng);
            }
            let r1 = *short_rate_path(&m, &grid, &noise, RateScheme::Exact)
                .unwrap()
                .last()
                .unwrap();
            s1 += r1;
            s2 += r1 * r1;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let exact_mean = 0.03 + 0.02 * (-0.5f64).exp();
        assert!((exact_mean - 0.042131).abs() < 1e-6);
        let exact_var = 1e-4 * (1.0 - (-1.0f64).exp());
        let se = (exact_var / n as f64).sqrt();
        assert!((mean - exact_mean).abs() < 3.0 * se, "{mean} vs {exact_mean}");
        assert!(((var - exact_var) / exact_var).abs() < 0.05);
    }

    #[test]
    fn lambda_examples() {
        let m = DeterministicMarket {
            horizon: 1.0,
            rate: RateCurve::constant(0.03),
            drift: vec![RateCurve::constant(0.07)],
            vol: vec![vec![RateCurve::constant(0.2)]],
        };
        assert!((m.lambda_of(0.5).unwrap()[0] - 0.2).abs() < 1e-15);

        let m2 = DeterministicMarket {
            horizon: 1.0,
            rate: RateCurve::constant(0.03),
            drift: vec![RateCurve::constant(0.05), RateCurve::constant(0.09)],
            vol: vec![
                vec![RateCurve::constant(0.2), RateCurve::constant(0.0)],
                vec![RateCurve::constant(0.0), RateCurve::constant(0.3)],
            ],
        };
        let l = m2.lambda_of(0.0).unwrap();
        assert!((l[0] - 0.1).abs() < 1e-14 && (l[1] - 0.2).abs() < 1e-14);

        let flat = DeterministicMarket {
            drift: vec![RateCurve::constant(0.03), RateCurve::constant(0.03)],
            ..m2.clone()
        };
        assert!(flat.lambda_of(0.3).unwrap().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn singular_sigma_and_horizon_errors() {
        let m = DeterministicMarket {
            horizon: 2.0,
            rate: RateCurve::constant(0.03),
            drift: vec![RateCurve::constant(0.05), RateCurve::constant(0.09)],
            vol: vec![
                vec![RateCurve::constant(0.2), RateCurve::constant(0.1)],
                vec![RateCurve::constant(0.4), RateCurve::constant(0.2)],
            ],
        };
        assert!(matches!(m.lambda_of(1.5), Err(McsError::SingularVolatility { t, .. }) if t == 1.5));
        assert!(matches!(m.r(2.5), Err(McsError::OutOfHorizon { .. })));
        assert!(m.r(-0.1).is_err());
    }

    #[test]
    fn zcb_kappa_zero_limit_is_continuous() {
        let mut m = base_vasicek();
        m.lambda1 = 0.1;
        m.horizon = 10.0;
        let mut m0 = m.clone();
        m0.kappa = 0.0;
        m.kappa = 1e-7;
        let a = m.zcb_price(0.0, 5.0, 0.03);
        let b = m0.zcb_price(0.0, 5.0, 0.03);
        assert!((a - b).abs() < 1e-6, "{a} {b}");
    }
}
