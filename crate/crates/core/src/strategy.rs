//! Investment strategies and closed-form consumption rules.
//!
//! The martingale rule for deterministic coefficients discounts at the
//! expected instantaneous return `f₃ = r + π(α − 1r)`; the CRRA benchmark
//! discounts at `f₂` (or `f₁` without risky assets). With the time
//! preference `β = r + ‖λ‖²(γ+1)/(2γ)` and `π = λ/(σγ)` the two coincide.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annuity::annuity_factor;
use crate::curve::{CurveExpr, RateCurve, RateFn};
use crate::error::{McsError, Result};
use crate::field::Field2D;
use crate::market::{DeterministicMarket, VasicekMarket};

/// A function of (t, r) used for the Vasicek-regime strategy components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateFn {
    /// Depends on time only.
    Time(RateCurve),
    /// Tabulated on a (t, r) grid.
    #[serde(skip)]
    Grid(Arc<Field2D>),
}

impl StateFn {
    #[inline]
    pub fn eval(&self, t: f64, r: f64) -> f64 {
        match self {
            StateFn::Time(c) => c.rate(t),
            StateFn::Grid(f) => f.eval(t, r),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, StateFn::Time(c) if c.constant_value() == Some(0.0))
    }
}

/// Bond and stock fractions (π₁, π₂) as functions of (t, r).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateStrategy {
    pub bond: StateFn,
    pub stock: StateFn,
}

impl StateStrategy {
    pub fn time_only(bond: RateCurve, stock: RateCurve) -> Self {
        Self {
            bond: StateFn::Time(bond),
            stock: StateFn::Time(stock),
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, r: f64) -> [f64; 2] {
        [self.bond.eval(t, r), self.stock.eval(t, r)]
    }
}

/// Fractions of wealth held in the risky assets; shorting is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "kebab-case")]
pub enum InvestmentStrategy {
    Deterministic { pi: Vec<RateCurve> },
    State(StateStrategy),
}

impl InvestmentStrategy {
    pub fn constant(pi: &[f64]) -> Self {
        InvestmentStrategy::Deterministic {
            pi: pi.iter().map(|&p| RateCurve::constant(p)).collect(),
        }
    }

    /// The (bond, stock) pair for the Vasicek market.
    pub fn as_state(&self) -> Result<StateStrategy> {
        match self {
            InvestmentStrategy::State(s) => Ok(s.clone()),
            InvestmentStrategy::Deterministic { pi } if pi.len() == 2 => {
                Ok(StateStrategy::time_only(pi[0].clone(), pi[1].clone()))
            }
            InvestmentStrategy::Deterministic { pi } => Err(McsError::Config(format!(
                "the Vasicek market needs two strategy components, got {}",
                pi.len()
            ))),
        }
    }

    pub fn deterministic_pi(&self) -> Result<&[RateCurve]> {
        match self {
            InvestmentStrategy::Deterministic { pi } => Ok(pi),
            InvestmentStrategy::State(_) => Err(McsError::Config(
                "a deterministic-coefficient operation needs a time-only strategy".into(),
            )),
        }
    }
}

fn check_dims(market: &DeterministicMarket, pi: &[RateCurve]) -> Result<()> {
    if pi.len() != market.assets() {
        return Err(McsError::Config(format!(
            "strategy has {} components but the market has {} risky assets",
            pi.len(),
            market.assets()
        )));
    }
    Ok(())
}

/// The curve `f₃(t) = r(t) + π(t)(α(t) − 1 r(t))`.
pub fn f3_curve(market: &DeterministicMarket, pi: &[RateCurve]) -> Result<CurveExpr> {
    check_dims(market, pi)?;
    let mut e = CurveExpr::new().term(1.0, vec![market.rate.clone()]);
    for (p, a) in pi.iter().zip(&market.drift) {
        e = e
            .term(1.0, vec![p.clone(), a.clone()])
            .term(-1.0, vec![p.clone(), market.rate.clone()]);
    }
    Ok(e)
}

/// Expected instantaneous return of the strategy: the MCS annuity rate.
pub fn mcs_rate_f3(market: &DeterministicMarket, pi: &[RateCurve], t: f64) -> Result<f64> {
    check_dims(market, pi)?;
    let r = market.r(t)?;
    let alpha = market.alpha(t)?;
    Ok(r + pi
        .iter()
        .zip(alpha.iter())
        .map(|(p, a)| p.rate(t) * (a - r))
        .sum::<f64>())
}

/// Wealth-to-consumption factor B_{f₃}(t) of the martingale rule.
pub fn mcs_factor(market: &DeterministicMarket, pi: &[RateCurve], t: f64) -> Result<f64> {
    market.check_time(t)?;
    annuity_factor(&f3_curve(market, pi)?, t, market.horizon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrraPreferences {
    /// Relative risk aversion γ > 0.
    pub gamma: f64,
    /// Time-preference rate β(t).
    pub beta: RateCurve,
}

impl CrraPreferences {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(McsError::Preference(format!("gamma must be > 0, got {}", self.gamma)));
        }
        self.beta.validate()
    }
}

/// Constant (σ, λ) of a single-asset market, checked on [0, T].
fn single_asset_constants(market: &DeterministicMarket) -> Result<Option<(f64, f64)>> {
    match market.assets() {
        0 => Ok(None),
        1 => {
            let sigma = market.vol[0][0]
                .constant_value()
                .ok_or_else(|| McsError::Domain("Merton policy needs a constant volatility".into()))?;
            let l0 = market.lambda_of(0.0)?[0];
            for i in 1..=16 {
                let t = market.horizon * i as f64 / 16.0;
                let l = market.lambda_of(t)?[0];
                if (l - l0).abs() > 1e-12 * l0.abs().max(1.0) {
                    return Err(McsError::Domain(format!(
                        "Merton policy needs a constant market price of risk (λ(0) = {l0}, λ({t}) = {l})"
                    )));
                }
            }
            Ok(Some((sigma, l0)))
        }
        n => Err(McsError::Domain(format!(
            "Merton policy is limited to one risky asset, got {n}"
        ))),
    }
}

/// The CRRA-optimal rule for one risky asset.
#[derive(Debug, Clone, PartialEq)]
pub struct MertonPolicy {
    /// `λ/(σγ)`; `None` without risky assets.
    pub pi_star: Option<f64>,
    /// `B_{f₂}(t)` (or `B_{f₁}(t)` without risky assets).
    pub factor: f64,
    /// The discount rate f₂(t) (or f₁(t)).
    pub rate: f64,
}

/// The curve `f₂ = f₁ + (γ−1)λ²/(2γ²)` with `f₁ = (β − (1−γ)r)/γ`.
pub fn merton_rate_curve(market: &DeterministicMarket, prefs: &CrraPreferences) -> Result<CurveExpr> {
    prefs.validate()?;
    let g = prefs.gamma;
    let premium = match single_asset_constants(market)? {
        Some((_, lambda)) => (g - 1.0) * lambda * lambda / (2.0 * g * g),
        None => 0.0,
    };
    Ok(CurveExpr::new()
        .term(1.0 / g, vec![prefs.beta.clone()])
        .term(-(1.0 - g) / g, vec![market.rate.clone()])
        .plus(premium))
}

pub fn merton_policy(market: &DeterministicMarket, prefs: &CrraPreferences, t: f64) -> Result<MertonPolicy> {
    market.check_time(t)?;
    let curve = merton_rate_curve(market, prefs)?;
    let pi_star = single_asset_constants(market)?.map(|(sigma, lambda)| lambda / (sigma * prefs.gamma));
    Ok(MertonPolicy {
        pi_star,
        factor: annuity_factor(&curve, t, market.horizon)?,
        rate: curve.rate(t),
    })
}

/// Time preference making the CRRA-optimal consumption a martingale:
/// `β(t) = r(t) + ‖λ(t)‖²(γ+1)/(2γ)`.
pub fn martingale_beta(market: &DeterministicMarket, gamma: f64, t: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(McsError::Preference(format!("gamma must be > 0, got {gamma}")));
    }
    let l = market.lambda_of(t)?;
    Ok(market.r(t)? + l.norm_squared() * (gamma + 1.0) / (2.0 * gamma))
}

/// [`martingale_beta`] as a curve, for markets with constant λ.
pub fn martingale_beta_curve(market: &DeterministicMarket, gamma: f64) -> Result<RateCurve> {
    let shift = martingale_beta(market, gamma, 0.0)? - market.r(0.0)?;
    for i in 1..=16 {
        let t = market.horizon * i as f64 / 16.0;
        let s = martingale_beta(market, gamma, t)? - market.r(t)?;
        if (s - shift).abs() > 1e-12 {
            return Err(McsError::Domain("martingale β curve needs a constant ‖λ‖".into()));
        }
    }
    Ok(match &market.rate {
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
    })
}

/// Drift rate of c = X/B_f: `r + πσλ − f`, zero exactly when f = f₃.
pub fn drift_residual<F: RateFn + ?Sized>(
    f: &F,
    market: &DeterministicMarket,
    pi: &[RateCurve],
    t: f64,
) -> Result<f64> {
    check_dims(market, pi)?;
    let r = market.r(t)?;
    let sigma_lambda = market.sigma(t)? * market.lambda_of(t)?;
    let premium: f64 = pi.iter().zip(sigma_lambda.iter()).map(|(p, sl)| p.rate(t) * sl).sum();
    Ok(r + premium - f.rate(t))
}

/// Drift and volatility rates of CRRA-optimal consumption:
/// `dc/c = (r − β + ‖λ‖²(γ+1)/(2γ))/γ dt + λᵀ/γ dW`.
pub fn merton_consumption_drift_vol(
    prefs: &CrraPreferences,
    market: &DeterministicMarket,
    t: f64,
) -> Result<(f64, f64)> {
    prefs.validate()?;
    let g = prefs.gamma;
    let l2 = market.lambda_of(t)?.norm_squared();
    let drift = (market.r(t)? - prefs.beta.rate(t) + l2 * (g + 1.0) / (2.0 * g)) / g;
    Ok((drift, l2.sqrt() / g))
}

/// How the wealth-to-consumption factor Z in `c = X/Z` is obtained.
#[derive(Debug, Clone)]
pub enum ConsumptionRule {
    /// Z = B_{f₃} for the given deterministic strategy.
    McsDeterministic { pi: Vec<RateCurve> },
    /// Z = B_{f₂} (CRRA-optimal feedback rule).
    Merton { prefs: CrraPreferences },
    /// Z = B_f for an explicit curve f (f ≡ 0 gives Z = T − t).
    AnnuityCurve { curve: RateCurve },
    /// Z = ā(t, r), the closed-form Vasicek annuity certain.
    AnnuityCertain,
    /// Z = a(t, r) read from a solved surface.
    PdeSurface(Arc<Field2D>),
}

impl ConsumptionRule {
    pub fn kind(&self) -> &'static str {
        match self {
            ConsumptionRule::McsDeterministic { .. } => "mcs-deterministic",
            ConsumptionRule::Merton { .. } => "merton",
            ConsumptionRule::AnnuityCurve { .. } => "annuity-curve",
            ConsumptionRule::AnnuityCertain => "annuity-certain",
            ConsumptionRule::PdeSurface(_) => "pde-surface",
        }
    }

    /// The discount curve f with Z = B_f, for deterministic factors.
    pub fn factor_curve(&self, market: &DeterministicMarket) -> Result<Option<CurveExpr>> {
        Ok(match self {
            ConsumptionRule::McsDeterministic { pi } => Some(f3_curve(market, pi)?),
            ConsumptionRule::Merton { prefs } => Some(merton_rate_curve(market, prefs)?),
            ConsumptionRule::AnnuityCurve { curve } => Some(CurveExpr::new().term(1.0, vec![curve.clone()])),
            _ => None,
        })
    }

    /// Z(t) in the deterministic regime.
    pub fn factor(&self, market: &DeterministicMarket, t: f64) -> Result<f64> {
        match self.factor_curve(market)? {
            Some(curve) => annuity_factor(&curve, t, market.horizon),
            None => Err(McsError::Config(format!(
                "rule '{}' needs the stochastic-rate regime",
                self.kind()
            ))),
        }
    }

    /// Z(t, r) in the Vasicek regime.
    pub fn state_factor(&self, market: &VasicekMarket, t: f64, r: f64) -> Result<f64> {
        match self {
            ConsumptionRule::AnnuityCertain => Ok(market.annuity_certain(t, r)),
            ConsumptionRule::PdeSurface(s) => Ok(s.eval(t, r)),
            other => Err(McsError::Config(format!(
                "rule '{}' needs the deterministic regime",
                other.kind()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annuity::constant_annuity;

    fn bs(r: f64, sigma: f64, lambda: f64, horizon: f64) -> DeterministicMarket {
        DeterministicMarket::single_asset(horizon, RateCurve::constant(r), sigma, lambda)
    }

    #[test]
    fn f3_examples() {
        let m = bs(0.02, 0.2, 0.25, 10.0);
        let zero = [RateCurve::constant(0.0)];
        assert!((mcs_rate_f3(&m, &zero, 1.0).unwrap() - 0.02).abs() < 1e-16);
        let half = [RateCurve::constant(0.5)];
        assert!((mcs_rate_f3(&m, &half, 1.0).unwrap() - 0.045).abs() < 1e-15);

        let m2 = DeterministicMarket {
            horizon: 5.0,
            rate: RateCurve::constant(0.02),
            drift: vec![RateCurve::constant(0.05), RateCurve::constant(0.08)],
            vol: vec![
                vec![RateCurve::constant(0.2), RateCurve::constant(0.0)],
                vec![RateCurve::constant(0.05), RateCurve::constant(0.3)],
            ],
        };
        let pi = [RateCurve::constant(0.3), RateCurve::constant(0.4)];
        assert!((mcs_rate_f3(&m2, &pi, 2.0).unwrap() - 0.053).abs() < 1e-15);
    }

    #[test]
    fn mcs_factor_examples() {
        let m = DeterministicMarket::money_market(20.0, RateCurve::constant(0.03));
        let b = mcs_factor(&m, &[], 0.0).unwrap();
        assert!((b - (1.0 - (-0.6f64).exp()) / 0.03).abs() < 1e-12);
        assert_eq!(mcs_factor(&m, &[], 20.0).unwrap(), 0.0);

        let m1 = bs(0.02, 0.2, 0.25, 10.0);
        let b1 = mcs_factor(&m1, &[RateCurve::constant(0.5)], 0.0).unwrap();
        let expected = (1.0 - (-0.45f64).exp()) / 0.045;
        assert!((b1 - expected).abs() < 1e-12);
        assert!((b1 - 8.052_707_741_738).abs() < 1e-11);
    }

    #[test]
    fn merton_examples() {
        let m = bs(0.03, 0.2, 0.3, 10.0);
        let prefs = CrraPreferences {
            gamma: 3.0,
            beta: RateCurve::constant(0.04),
        };
        let p = merton_policy(&m, &prefs, 0.0).unwrap();
        assert!((p.pi_star.unwrap() - 0.5).abs() < 1e-15);

        let log = CrraPreferences {
            gamma: 1.0,
            beta: RateCurve::constant(0.04),
        };
        let p = merton_policy(&m, &log, 2.0).unwrap();
        assert!((p.rate - 0.04).abs() < 1e-16);

        // β ≡ r and λ = 0: pure annuity B_r
        let flat = bs(0.03, 0.2, 0.0, 10.0);
        let pr = CrraPreferences {
            gamma: 4.0,
            beta: RateCurve::constant(0.03),
        };
        let p = merton_policy(&flat, &pr, 0.0).unwrap();
        assert!((p.factor - constant_annuity(0.03, 10.0)).abs() < 1e-13);
        let (drift, _) = merton_consumption_drift_vol(&pr, &flat, 1.0).unwrap();
        assert_eq!(drift, 0.0);

        let bad = CrraPreferences {
            gamma: 0.0,
            beta: RateCurve::constant(0.03),
        };
        assert!(matches!(merton_policy(&m, &bad, 0.0), Err(McsError::Preference(_))));
    }

    #[test]
    fn martingale_beta_examples() {
        let m0 = bs(0.02, 0.2, 0.0, 5.0);
        assert_eq!(martingale_beta(&m0, 2.0, 1.0).unwrap(), 0.02);
        let m = bs(0.02, 0.2, 0.3, 5.0);
        assert!((martingale_beta(&m, 1.0, 1.0).unwrap() - 0.11).abs() < 1e-15);
        let big = martingale_beta(&m, 1e9, 1.0).unwrap();
        assert!((big - (0.02 + 0.045)).abs() < 1e-9);
    }

    #[test]
    fn drift_residual_examples() {
        let m = bs(0.02, 0.2, 0.25, 10.0);
        let pi = [RateCurve::constant(0.6)];
        let f3 = f3_curve(&m, &pi).unwrap();
        assert!(drift_residual(&f3, &m, &pi, 3.0).unwrap().abs() < 1e-14);
        let bumped = crate::curve::Shifted { base: &f3, shift: 0.01 };
        assert!((drift_residual(&bumped, &m, &pi, 3.0).unwrap() + 0.01).abs() < 1e-14);

        // Merton with the martingale β: f₂ collapses onto f₃ at π*
        let gamma = 2.0;
        let prefs = CrraPreferences {
            gamma,
            beta: martingale_beta_curve(&m, gamma).unwrap(),
        };
        let pol = merton_policy(&m, &prefs, 0.0).unwrap();
        let pi_star = [RateCurve::constant(pol.pi_star.unwrap())];
        let f2 = merton_rate_curve(&m, &prefs).unwrap();
        assert!(drift_residual(&f2, &m, &pi_star, 4.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn merton_drift_vol_examples() {
        let m = bs(0.02, 0.2, 0.3, 10.0);
        let prefs = CrraPreferences {
            gamma: 1.0,
            beta: RateCurve::constant(0.02),
        };
        let (d, v) = merton_consumption_drift_vol(&prefs, &m, 0.0).unwrap();
        assert!((d - 0.09).abs() < 1e-15 && (v - 0.3).abs() < 1e-15);
        let mg = CrraPreferences {
            gamma: 2.5,
            beta: martingale_beta_curve(&m, 2.5).unwrap(),
        };
        assert!(merton_consumption_drift_vol(&mg, &m, 3.0).unwrap().0.abs() < 1e-15);
        let mm = DeterministicMarket::money_market(10.0, RateCurve::constant(0.05));
        let p = CrraPreferences {
            gamma: 2.0,
            beta: RateCurve::constant(0.03),
        };
        assert!((merton_consumption_drift_vol(&p, &mm, 1.0).unwrap().0 - 0.01).abs() < 1e-16);
    }
}
