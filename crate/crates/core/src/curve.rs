//! Scalar functions of time: rate curves and deterministic coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{McsError, Result};

/// A scalar function of time, with an optional closed-form integral.
pub trait RateFn: Send + Sync {
    fn rate(&self, t: f64) -> f64;

    /// ∫_a^b f(s) ds when available in closed form.
    fn cumulative(&self, _a: f64, _b: f64) -> Option<f64> {
        None
    }

    /// Points where the function (or its derivative) may jump.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// `Some(c)` when the function is identically `c`.
    fn constant_value(&self) -> Option<f64> {
        None
    }
}

/// Named parametric families of time functions (per-year rates, times in years).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RateCurve {
    Constant {
        value: f64,
    },
    /// `intercept + slope * t`
    Affine {
        intercept: f64,
        slope: f64,
    },
    /// `values[i]` on `[breaks[i-1], breaks[i])`, with `values.len() == breaks.len() + 1`.
    PiecewiseConstant {
        breaks: Vec<f64>,
        values: Vec<f64>,
    },
    /// Linear interpolation through `(times[i], values[i])`, flat outside.
    Tabulated {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

impl RateCurve {
    pub fn constant(value: f64) -> Self {
        RateCurve::Constant { value }
    }

    pub fn affine(intercept: f64, slope: f64) -> Self {
        RateCurve::Affine { intercept, slope }
    }

    /// Straight line from `start` at t = 0 to `end` at t = `horizon`.
    pub fn glide(start: f64, end: f64, horizon: f64) -> Self {
        RateCurve::Affine {
            intercept: start,
            slope: (end - start) / horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            RateCurve::Constant { value } if !value.is_finite() => {
                Err(McsError::Config("constant curve value is not finite".into()))
            }
            RateCurve::Affine { intercept, slope } if !(intercept.is_finite() && slope.is_finite()) => {
                Err(McsError::Config("affine curve coefficients not finite".into()))
            }
            RateCurve::PiecewiseConstant { breaks, values } => {
                if values.len() != breaks.len() + 1 {
                    return Err(McsError::Config(format!(
                        "piecewise-constant curve needs {} values for {} breaks, got {}",
                        breaks.len() + 1,
                        breaks.len(),
                        values.len()
                    )));
                }
                if !finite(breaks) || !finite(values) || breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(McsError::Config(
                        "piecewise-constant breaks must be finite and strictly increasing".into(),
                    ));
                }
                Ok(())
            }
            RateCurve::Tabulated { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(McsError::Config(
                        "tabulated curve needs matching, non-empty times and values".into(),
                    ));
                }
                if !finite(times) || !finite(values) || times.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(McsError::Config(
                        "tabulated times must be finite and strictly increasing".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Antiderivative F with F(0) = 0.
    fn antiderivative(&self, t: f64) -> f64 {
        match self {
            RateCurve::Constant { value } => value * t,
            RateCurve::Affine { intercept, slope } => intercept * t + 0.5 * slope * t * t,
            RateCurve::PiecewiseConstant { breaks, values } => {
                let (lo, hi) = if t >= 0.0 { (0.0, t) } else { (t, 0.0) };
                let sign = if t >= 0.0 { 1.0 } else { -1.0 };
                let mut acc = 0.0;
                let mut left = f64::NEG_INFINITY;
                for (i, v) in values.iter().enumerate() {
                    let right = breaks.get(i).copied().unwrap_or(f64::INFINITY);
                    let a = lo.max(left);
                    let b = hi.min(right);
                    if b > a {
                        acc += v * (b - a);
                    }
                    left = right;
                }
                sign * acc
            }
            RateCurve::Tabulated { times, .. } => {
                // piecewise linear, flat extrapolation
                let seg = |a: f64, b: f64| -> f64 {
                    if b <= a {
                        return 0.0;
                    }
                    let mid = 0.5 * (a + b);
                    self.rate(mid) * (b - a)
                };
                let (lo, hi, sign) = if t >= 0.0 { (0.0, t, 1.0) } else { (t, 0.0, -1.0) };
                let mut knots = vec![lo];
                knots.extend(times.iter().copied().filter(|&x| x > lo && x < hi));
                knots.push(hi);
                sign * knots.windows(2).map(|w| seg(w[0], w[1])).sum::<f64>()
            }
        }
    }
}

impl RateFn for RateCurve {
    fn rate(&self, t: f64) -> f64 {
        match self {
            RateCurve::Constant { value } => *value,
            RateCurve::Affine { intercept, slope } => intercept + slope * t,
            RateCurve::PiecewiseConstant { breaks, values } => {
                let idx = breaks.partition_point(|&b| b <= t);
                values[idx]
            }
            RateCurve::Tabulated { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                let last = times.len() - 1;
                if t >= times[last] {
                    return values[last];
                }
                let i = times.partition_point(|&x| x <= t) - 1;
                let w = (t - times[i]) / (times[i + 1] - times[i]);
                values[i] + w * (values[i + 1] - values[i])
            }
        }
    }

    fn cumulative(&self, a: f64, b: f64) -> Option<f64> {
        Some(self.antiderivative(b) - self.antiderivative(a))
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self {
            RateCurve::PiecewiseConstant { breaks, .. } => breaks.clone(),
            RateCurve::Tabulated { times, .. } => times.clone(),
            _ => Vec::new(),
        }
    }

    fn constant_value(&self) -> Option<f64> {
        match self {
            RateCurve::Constant { value } => Some(*value),
            _ => None,
        }
    }
}

/// Wraps a closure as a [`RateFn`] with no closed-form integral.
pub struct FnRate<F>(pub F);

impl<F: Fn(f64) -> f64 + Send + Sync> RateFn for FnRate<F> {
    fn rate(&self, t: f64) -> f64 {
        (self.0)(t)
    }
}

/// A curve shifted by a constant: `t ↦ base(t) + shift`.
pub struct Shifted<'a, R: RateFn + ?Sized> {
    pub base: &'a R,
    pub shift: f64,
}

impl<R: RateFn + ?Sized> RateFn for Shifted<'_, R> {
    fn rate(&self, t: f64) -> f64 {
        self.base.rate(t) + self.shift
    }

    fn cumulative(&self, a: f64, b: f64) -> Option<f64> {
        self.base.cumulative(a, b).map(|c| c + self.shift * (b - a))
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.base.breakpoints()
    }

    fn constant_value(&self) -> Option<f64> {
        self.base.constant_value().map(|c| c + self.shift)
    }
}

/// `Σ_k w_k Π_j c_kj(t) + shift`: sums of products of curves.
///
/// Closed-form integrals are kept whenever each product has at most one
/// non-constant factor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurveExpr {
    terms: Vec<(f64, Vec<RateCurve>)>,
    shift: f64,
}

impl CurveExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn term(mut self, weight: f64, factors: Vec<RateCurve>) -> Self {
        if weight != 0.0 {
            self.terms.push((weight, factors));
        }
        self
    }

    pub fn plus(mut self, shift: f64) -> Self {
        self.shift += shift;
        self
    }

    /// Splits a product into its constant part and the non-constant factors.
    fn split(factors: &[RateCurve]) -> (f64, Vec<&RateCurve>) {
        let mut k = 1.0;
        let mut rest = Vec::new();
        for f in factors {
            match f.constant_value() {
                Some(c) => k *= c,
                None => rest.push(f),
            }
        }
        (k, rest)
    }
}

impl RateFn for CurveExpr {
    fn rate(&self, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|(w, fs)| w * fs.iter().map(|f| f.rate(t)).product::<f64>())
            .sum::<f64>()
            + self.shift
    }

    fn cumulative(&self, a: f64, b: f64) -> Option<f64> {
        let mut acc = self.shift * (b - a);
        for (w, fs) in &self.terms {
            let (k, rest) = Self::split(fs);
            match rest.as_slice() {
                [] => acc += w * k * (b - a),
                [single] => acc += w * k * single.cumulative(a, b)?,
                _ => return None,
            }
        }
        Some(acc)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .terms
            .iter()
            .flat_map(|(_, fs)| fs.iter().flat_map(|f| f.breakpoints()))
            .collect();
        all.sort_by(|x, y| x.total_cmp(y));
        all.dedup();
        all
    }

    fn constant_value(&self) -> Option<f64> {
        let mut acc = self.shift;
        for (w, fs) in &self.terms {
            let (k, rest) = Self::split(fs);
            if !rest.is_empty() {
                return None;
            }
            acc += w * k;
        }
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature;

    #[test]
    fn cumulative_matches_quadrature() {
        let curves = [
            RateCurve::constant(0.04),
            RateCurve::affine(0.01, 0.002),
            RateCurve::PiecewiseConstant {
                breaks: vec![2.0, 5.0],
                values: vec![0.01, 0.03, 0.02],
            },
            RateCurve::Tabulated {
                times: vec![0.0, 1.0, 4.0],
                values: vec![0.02, 0.05, 0.01],
            },
        ];
        for c in &curves {
            let exact = c.cumulative(0.5, 7.0).unwrap();
            let q = quadrature::integrate_with_breaks(|s| c.rate(s), 0.5, 7.0, &c.breakpoints(), 1e-13);
            assert!((exact - q).abs() < 1e-12, "{c:?}: {exact} vs {q}");
        }
    }

    #[test]
    fn expression_integrals() {
        let e = CurveExpr::new()
            .term(1.0, vec![RateCurve::affine(0.02, 0.001)])
            .term(0.5, vec![RateCurve::constant(0.3), RateCurve::affine(0.0, 0.01)])
            .plus(0.01);
        let q = quadrature::integrate(|s| e.rate(s), 1.0, 9.0, 1e-14);
        assert!((e.cumulative(1.0, 9.0).unwrap() - q).abs() < 1e-13);
        let prod = CurveExpr::new().term(1.0, vec![RateCurve::affine(0.0, 1.0), RateCurve::affine(0.0, 1.0)]);
        assert!(prod.cumulative(0.0, 1.0).is_none());
        let c = CurveExpr::new()
            .term(2.0, vec![RateCurve::constant(0.1), RateCurve::constant(0.2)])
            .plus(0.01);
        assert_eq!(c.constant_value(), Some(2.0 * 0.1 * 0.2 + 0.01));
    }

    #[test]
    fn piecewise_validation_rejects_bad_lengths() {
        let c = RateCurve::PiecewiseConstant {
            breaks: vec![1.0],
            values: vec![0.1],
        };
        assert!(c.validate().is_err());
    }
}
