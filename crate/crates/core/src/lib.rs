//! Martingale consumption strategies under given investment strategies.
//!
//! The crate computes wealth-to-consumption factors that make the
//! consumption rate `c = X / Z` a martingale, simulates the resulting
//! wealth and consumption paths, solves the semilinear PDE of the
//! stochastic-rate case, and runs the discrete-time recursion on finite
//! scenario trees.

/// Version of this crate, stamped into CLI artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod annuity;
pub mod config;
pub mod curve;
pub mod discrete;
pub mod error;
pub mod field;
pub mod market;
pub mod pde;
pub mod quadrature;
pub mod sim;
pub mod strategy;

pub use annuity::{annuity_factor, factor_ode_residual, AnnuityAnsatz, Kernel, KernelSpec, LeibnizTerms};
pub use config::{Command, ExperimentSpec, PdeSpec, RuleSpec, StrategySpec, TreeSpec};
pub use curve::{CurveExpr, FnRate, RateCurve, RateFn};
pub use discrete::{
    candidate_factor, martingale_verify, solve_recursion, DiscreteFactorProcess, MartingaleCheck, NodeSpec,
    ScenarioTree,
};
pub use error::{McsError, Result};
pub use field::Field2D;
pub use market::{DeterministicMarket, Market, RateScheme, RateVolFn, TimeGrid, VasicekMarket};
pub use pde::{
    alpha_c_residual, alpha_c_sup, annuity_certain_surface, hedge_refinement, hedge_strategy, mcs_refinement,
    simplified_pde_residual, solve_annuity_pde, solve_mcs_pde, FactorSurface, Grid2D, Provenance, RefinementRow,
};
pub use sim::{
    exhaustion_check, martingale_test, simulate, vol_check, ExhaustionStats, MartingaleReport, PathBundle, Scheme,
    SimConfig, VolTable,
};
pub use strategy::{
    drift_residual, martingale_beta, martingale_beta_curve, mcs_factor, mcs_rate_f3, merton_consumption_drift_vol,
    merton_policy, ConsumptionRule, CrraPreferences, InvestmentStrategy, MertonPolicy, StateFn, StateStrategy,
};
