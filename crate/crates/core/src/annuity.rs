//! Annuity factors B_f and the two-argument ansatz a(t, r) = B_{r g(t,·) + h(t,·)}(t).
//!
//! `B_f(t) = ∫_t^T exp(−∫_t^u f(s) ds) du` is the value at t of a continuous
//! unit annuity on [t, T] discounted along the curve f. It satisfies
//! `B_f' = f B_f − 1` wherever f is continuous, with `B_f(T) = 0`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::curve::{RateCurve, RateFn};
use crate::error::{McsError, Result};
use crate::market::TimeGrid;
use crate::quadrature::{self, GaussLegendre};

/// Absolute tolerance of [`annuity_factor`].
pub const FACTOR_TOL: f64 = 1e-10;
/// Absolute tolerance of the Leibniz double integrals.
pub const LEIBNIZ_TOL: f64 = 1e-8;
/// Step used by the finite-difference self-checks.
pub const FD_STEP: f64 = 1e-4;

const INNER_TOL: f64 = 1e-14;

/// `(1 − e^{−α τ})/α`, continuous through α = 0 and valid for τ < 0.
pub fn constant_annuity(alpha: f64, tau: f64) -> f64 {
    let x = alpha * tau;
    if x.abs() < 1e-8 {
        tau * (1.0 - 0.5 * x + x * x / 6.0)
    } else {
        -(-x).exp_m1() / alpha
    }
}

/// Signed ∫_t^u f, closed form when the curve provides one.
fn cumulative<R: RateFn + ?Sized>(f: &R, t: f64, u: f64) -> f64 {
    f.cumulative(t, u)
        .unwrap_or_else(|| quadrature::integrate_with_breaks(|s| f.rate(s), t, u, &f.breakpoints(), INNER_TOL))
}

/// Unchecked factor; `t > horizon` yields the (negative) analytic continuation.
fn factor_raw<R: RateFn + ?Sized>(f: &R, t: f64, horizon: f64, tol: f64) -> f64 {
    if t == horizon {
        return 0.0;
    }
    if let Some(c) = f.constant_value() {
        return constant_annuity(c, horizon - t);
    }
    let (lo, hi, sign) = if t < horizon {
        (t, horizon, 1.0)
    } else {
        (horizon, t, -1.0)
    };
    sign * quadrature::integrate_with_breaks(|u| (-cumulative(f, t, u)).exp(), lo, hi, &f.breakpoints(), tol)
}

/// Annuity factor B_f(t) on [t, T].
pub fn annuity_factor<R: RateFn + ?Sized>(f: &R, t: f64, horizon: f64) -> Result<f64> {
    if !(t >= 0.0 && t <= horizon) {
        return Err(McsError::Domain(format!(
            "annuity factor needs 0 <= t <= T, got t = {t}, T = {horizon}"
        )));
    }
    Ok(factor_raw(f, t, horizon, 0.1 * FACTOR_TOL))
}

/// Central-difference derivative of B_f minus `f(t) B_f(t) − 1`.
pub fn factor_ode_residual(f: &RateCurve, t: f64, horizon: f64) -> Result<f64> {
    if !(t >= 0.0 && t < horizon) {
        return Err(McsError::Domain(format!(
            "ODE residual needs 0 <= t < T, got t = {t}, T = {horizon}"
        )));
    }
    if let RateCurve::PiecewiseConstant { breaks, .. } = f {
        if let Some(b) = breaks.iter().find(|&&b| (b - t).abs() <= FD_STEP) {
            return Err(McsError::Breakpoint(*b));
        }
    }
    let h = FD_STEP;
    let tol = 1e-15;
    let derivative = (factor_raw(f, t + h, horizon, tol) - factor_raw(f, t - h, horizon, tol)) / (2.0 * h);
    let b = factor_raw(f, t, horizon, tol);
    Ok(derivative - (f.rate(t) * b - 1.0))
}

/// B_f on every grid point by backward accumulation, plus ∫ f over each step.
///
/// Uses `B(t_k) = ∫_{t_k}^{t_{k+1}} e^{−∫_{t_k}^u f} du + e^{−∫_{t_k}^{t_{k+1}} f} B(t_{k+1})`
/// with a fixed Gauss–Legendre rule per step (steps split at breakpoints).
pub fn factor_on_grid<R: RateFn + ?Sized>(f: &R, grid: &TimeGrid) -> (Vec<f64>, Vec<f64>) {
    let pts = grid.points();
    let n = grid.steps();
    let mut b = vec![0.0; n + 1];
    let mut step_int = vec![0.0; n];
    if let Some(c) = f.constant_value() {
        let horizon = grid.horizon();
        for (k, &t) in pts.iter().enumerate() {
            b[k] = constant_annuity(c, horizon - t);
        }
        for k in 0..n {
            step_int[k] = c * grid.dt(k);
        }
        b[n] = 0.0;
        return (b, step_int);
    }
    let rule = GaussLegendre::new(8);
    let breaks = f.breakpoints();
    for k in (0..n).rev() {
        let (t0, t1) = (pts[k], pts[k + 1]);
        let mut knots = vec![t0];
        knots.extend(breaks.iter().copied().filter(|&x| x > t0 && x < t1));
        knots.push(t1);
        let mut acc_int = 0.0;
        let mut acc_pv = 0.0;
        for w in knots.windows(2) {
            let (a, c) = (w[0], w[1]);
            let base = acc_int;
            acc_pv += rule.integrate(|u| (-(base + step_cumulative(f, &rule, a, u))).exp(), a, c);
            acc_int += step_cumulative(f, &rule, a, c);
        }
        step_int[k] = acc_int;
        b[k] = acc_pv + (-acc_int).exp() * b[k + 1];
    }
    (b, step_int)
}

fn step_cumulative<R: RateFn + ?Sized>(f: &R, rule: &GaussLegendre, a: f64, u: f64) -> f64 {
    f.cumulative(a, u)
        .unwrap_or_else(|| rule.integrate(|s| f.rate(s), a, u))
}

/// A weight or rate function k(t, s) of the valuation time t and the future time s.
pub trait Kernel: Send + Sync {
    fn value(&self, t: f64, s: f64) -> f64;

    /// ∂k/∂t; central difference with step 1e-5 unless overridden.
    fn d_dt(&self, t: f64, s: f64) -> f64 {
        let h = 1e-5;
        (self.value(t + h, s) - self.value(t - h, s)) / (2.0 * h)
    }

    /// ∫_t^u k(t, s) ds in closed form, if known.
    fn integral(&self, _t: f64, _u: f64) -> Option<f64> {
        None
    }

    /// ∫_t^u ∂k/∂t(t, s) ds in closed form, if known.
    fn d_dt_integral(&self, _t: f64, _u: f64) -> Option<f64> {
        None
    }
}

/// Named kernel families usable in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    Constant {
        value: f64,
    },
    /// `intercept + slope * t`, independent of s.
    LinearInT {
        intercept: f64,
        slope: f64,
    },
    /// Yield loading `(1 − e^{−κ(s−t)})/(κ(s−t))`.
    VasicekLoading {
        kappa: f64,
    },
    /// Expected-rate loading `e^{−κ(s−t)}`.
    ExpDecay {
        kappa: f64,
    },
    /// `f(s)`, independent of t.
    Curve {
        curve: RateCurve,
    },
}

fn yield_loading(kappa: f64, x: f64) -> f64 {
    let y = kappa * x;
    if y.abs() < 1e-5 {
        1.0 - 0.5 * y + y * y / 6.0
    } else {
        -(-y).exp_m1() / y
    }
}

/// d/dx of the yield loading at x = s − t.
fn yield_loading_dx(kappa: f64, x: f64) -> f64 {
    let y = kappa * x;
    if y.abs() < 1e-4 {
        kappa * (-0.5 + y / 3.0 - y * y / 8.0)
    } else {
        let e = (-y).exp();
        (y * e - (1.0 - e)) / (kappa * x * x)
    }
}

impl Kernel for KernelSpec {
    fn value(&self, t: f64, s: f64) -> f64 {
        match self {
            KernelSpec::Constant { value } => *value,
            KernelSpec::LinearInT { intercept, slope } => intercept + slope * t,
            KernelSpec::VasicekLoading { kappa } => yield_loading(*kappa, s - t),
            KernelSpec::ExpDecay { kappa } => (-kappa * (s - t)).exp(),
            KernelSpec::Curve { curve } => curve.rate(s),
        }
    }

    fn d_dt(&self, t: f64, s: f64) -> f64 {
        match self {
            KernelSpec::Constant { .. } | KernelSpec::Curve { .. } => 0.0,
            KernelSpec::LinearInT { slope, .. } => *slope,
            KernelSpec::VasicekLoading { kappa } => -yield_loading_dx(*kappa, s - t),
            KernelSpec::ExpDecay { kappa } => kappa * (-kappa * (s - t)).exp(),
        }
    }

    fn integral(&self, t: f64, u: f64) -> Option<f64> {
        match self {
            KernelSpec::Constant { value } => Some(value * (u - t)),
            KernelSpec::LinearInT { intercept, slope } => Some((intercept + slope * t) * (u - t)),
            KernelSpec::VasicekLoading { .. } => None,
            KernelSpec::ExpDecay { kappa } => Some(constant_annuity(*kappa, u - t)),
            KernelSpec::Curve { curve } => curve.cumulative(t, u),
        }
    }

    fn d_dt_integral(&self, t: f64, u: f64) -> Option<f64> {
        match self {
            KernelSpec::Constant { .. } | KernelSpec::Curve { .. } => Some(0.0),
            KernelSpec::LinearInT { slope, .. } => Some(slope * (u - t)),
            // ∫_t^u −∂_s ℓ(s − t) ds
            KernelSpec::VasicekLoading { kappa } => Some(1.0 - yield_loading(*kappa, u - t)),
            KernelSpec::ExpDecay { kappa } => Some(-(-kappa * (u - t)).exp_m1()),
        }
    }
}

/// Wraps a closure `(t, s) ↦ k` as a [`Kernel`].
pub struct FnKernel<F>(pub F);

impl<F: Fn(f64, f64) -> f64 + Send + Sync> Kernel for FnKernel<F> {
    fn value(&self, t: f64, s: f64) -> f64 {
        (self.0)(t, s)
    }
}

/// a(t, r) = ∫_t^T exp(−∫_t^u (r g(t,s) + h(t,s)) ds) du with g(t, t) = 1.
#[derive(Clone)]
pub struct AnnuityAnsatz {
    pub g: Arc<dyn Kernel>,
    pub h: Arc<dyn Kernel>,
}

impl std::fmt::Debug for AnnuityAnsatz {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnnuityAnsatz").finish_non_exhaustive()
    }
}

/// Breakdown of ∂a/∂t for the ansatz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeibnizTerms {
    pub h1: f64,
    pub h2: f64,
}

impl AnnuityAnsatz {
    /// Builds the ansatz after checking g(t, t) = 1 on 101 points of [0, T].
    pub fn new(g: Arc<dyn Kernel>, h: Arc<dyn Kernel>, horizon: f64) -> Result<Self> {
        for i in 0..=100 {
            let t = horizon * i as f64 / 100.0;
            let d = g.value(t, t) - 1.0;
            if d.abs() > 1e-12 {
                return Err(McsError::Domain(format!(
                    "ansatz weight g(t, t) = {} != 1 at t = {t}",
                    1.0 + d
                )));
            }
        }
        Ok(Self { g, h })
    }

    pub fn from_specs(g: KernelSpec, h: KernelSpec, horizon: f64) -> Result<Self> {
        Self::new(Arc::new(g), Arc::new(h), horizon)
    }

    fn kernel_integral(k: &dyn Kernel, t: f64, u: f64) -> f64 {
        k.integral(t, u)
            .unwrap_or_else(|| quadrature::integrate(|s| k.value(t, s), t, u, INNER_TOL))
    }

    fn d_dt_integral(k: &dyn Kernel, t: f64, u: f64) -> f64 {
        k.d_dt_integral(t, u)
            .unwrap_or_else(|| quadrature::integrate(|s| k.d_dt(t, s), t, u, INNER_TOL))
    }

    /// ∫_t^u (r g(t,s) + h(t,s)) ds.
    pub fn exponent(&self, t: f64, u: f64, r: f64) -> f64 {
        let gi = if r == 0.0 {
            0.0
        } else {
            r * Self::kernel_integral(self.g.as_ref(), t, u)
        };
        gi + Self::kernel_integral(self.h.as_ref(), t, u)
    }

    pub(crate) fn surface_raw(&self, t: f64, r: f64, horizon: f64, tol: f64) -> f64 {
        if t == horizon {
            return 0.0;
        }
        let (lo, hi, sign) = if t < horizon {
            (t, horizon, 1.0)
        } else {
            (horizon, t, -1.0)
        };
        sign * quadrature::integrate(|u| (-self.exponent(t, u, r)).exp(), lo, hi, tol)
    }

    /// Value a(t, r).
    pub fn surface(&self, t: f64, r: f64, horizon: f64) -> Result<f64> {
        if !(t >= 0.0 && t <= horizon) {
            return Err(McsError::Domain(format!(
                "ansatz needs 0 <= t <= T, got t = {t}, T = {horizon}"
            )));
        }
        Ok(self.surface_raw(t, r, horizon, 1e-12))
    }

    /// H₁ and H₂: discounted inner integrals of r ∂g/∂t and ∂h/∂t.
    pub fn leibniz_terms(&self, t: f64, r: f64, horizon: f64) -> Result<LeibnizTerms> {
        if !(t >= 0.0 && t <= horizon) {
            return Err(McsError::Domain(format!("Leibniz terms need 0 <= t <= T, got t = {t}")));
        }
        let tol = 0.01 * LEIBNIZ_TOL;
        let h1 = if r == 0.0 {
            0.0
        } else {
            r * quadrature::integrate(
                |u| (-self.exponent(t, u, r)).exp() * Self::d_dt_integral(self.g.as_ref(), t, u),
                t,
                horizon,
                tol,
            )
        };
        let h2 = quadrature::integrate(
            |u| (-self.exponent(t, u, r)).exp() * Self::d_dt_integral(self.h.as_ref(), t, u),
            t,
            horizon,
            tol,
        );
        Ok(LeibnizTerms { h1, h2 })
    }

    /// Finite-difference ∂a/∂t minus `(r + h(t,t)) a − 1 − H₁ − H₂`.
    pub fn dadt_identity_check(&self, t: f64, r: f64, horizon: f64) -> Result<f64> {
        let terms = self.leibniz_terms(t, r, horizon)?;
        let h = FD_STEP;
        let tol = 1e-15;
        let dadt = (self.surface_raw(t + h, r, horizon, tol) - self.surface_raw(t - h, r, horizon, tol)) / (2.0 * h);
        let a = self.surface_raw(t, r, horizon, tol);
        let rhs = (r + self.h.value(t, t)) * a - 1.0 - terms.h1 - terms.h2;
        Ok(dadt - rhs)
    }
}
