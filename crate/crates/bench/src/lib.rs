//! Shared fixtures for the benchmarks.

use mcs_core::{DeterministicMarket, RateCurve, RateVolFn, VasicekMarket};

pub fn black_scholes() -> DeterministicMarket {
    DeterministicMarket::single_asset(20.0, RateCurve::constant(0.02), 0.2, 0.25)
}

pub fn vasicek() -> VasicekMarket {
    VasicekMarket {
        kappa: 0.5,
        theta: 0.03,
        sigma_r: 0.01,
        r0: 0.03,
        lambda1: 0.1,
        lambda2: 0.3,
        sigma11: RateVolFn::VasicekBond { maturity: 30.0 },
        sigma21: RateVolFn::Constant { value: 0.02 },
        sigma22: 0.18,
        horizon: 20.0,
    }
}
