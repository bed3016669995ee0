//! TOML experiment specifications and their resolution into model objects.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::curve::RateCurve;
use crate::discrete::{NodeSpec, ScenarioTree};
use crate::error::{McsError, Result};
use crate::market::Market;
use crate::pde::{annuity_certain_surface, hedge_strategy, solve_mcs_pde, Grid2D};
use crate::sim::SimConfig;
use crate::strategy::{martingale_beta_curve, ConsumptionRule, CrraPreferences, InvestmentStrategy, StateStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Factor,
    Simulate,
    Pde,
    Annuity,
    Discrete,
    CompareMerton,
    Convergence,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Factor => "factor",
            Command::Simulate => "simulate",
            Command::Pde => "pde",
            Command::Annuity => "annuity",
            Command::Discrete => "discrete",
            Command::CompareMerton => "compare-merton",
            Command::Convergence => "convergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StrategySpec {
    /// One time curve per risky asset.
    Deterministic { pi: Vec<RateCurve> },
    /// Bond and stock fractions over time in the Vasicek market.
    State { bond: RateCurve, stock: RateCurve },
    /// The bond-only strategy that replicates a fixed consumption stream.
    AnnuityHedge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RuleSpec {
    /// The martingale rule for the configured strategy.
    Mcs,
    /// CRRA-optimal rule; `beta` defaults to the martingale time preference.
    Merton {
        gamma: f64,
        #[serde(default)]
        beta: Option<RateCurve>,
    },
    AnnuityCurve {
        curve: RateCurve,
    },
    AnnuityCertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSpec {
    #[serde(default = "default_nodes")]
    pub n_t: usize,
    #[serde(default = "default_nodes")]
    pub n_r: usize,
    /// Rate range; both default to r₀ ± 6 stationary standard deviations.
    #[serde(default)]
    pub r_min: Option<f64>,
    #[serde(default)]
    pub r_max: Option<f64>,
}

fn default_nodes() -> usize {
    401
}

impl Default for PdeSpec {
    fn default() -> Self {
        Self {
            n_t: default_nodes(),
            n_r: default_nodes(),
            r_min: None,
            r_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TreeSpec {
    FixedRate {
        rate: f64,
        periods: usize,
    },
    /// `periods[i]` lists the `[return, probability]` branches of period i + 1.
    Independent {
        periods: Vec<Vec<[f64; 2]>>,
    },
    Nested {
        root: NodeSpec,
    },
    /// The shipped three-period Markov counterexample.
    Dependent,
}

impl TreeSpec {
    pub fn build(&self) -> Result<ScenarioTree> {
        match self {
            TreeSpec::FixedRate { rate, periods } => ScenarioTree::fixed_rate(*rate, *periods),
            TreeSpec::Independent { periods } => {
                let per: Vec<Vec<(f64, f64)>> = periods
                    .iter()
                    .map(|p| p.iter().map(|[r, q]| (*r, *q)).collect())
                    .collect();
                ScenarioTree::independent(&per)
            }
            TreeSpec::Nested { root } => ScenarioTree::from_spec(root),
            TreeSpec::Dependent => Ok(ScenarioTree::dependent_counterexample()),
        }
    }
}

/// A complete experiment: which command to run and on what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Optional here; the command line names the command when absent.
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub market: Option<Market>,
    #[serde(default)]
    pub strategy: Option<StrategySpec>,
    #[serde(default)]
    pub rule: Option<RuleSpec>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub pde: PdeSpec,
    #[serde(default)]
    pub tree: Option<TreeSpec>,
    /// Refinement doublings for `pde` and `convergence`.
    #[serde(default)]
    pub refine: u32,
}

fn missing(key: &str) -> McsError {
    McsError::Config(format!("{key}: missing"))
}

fn at(key: &str) -> impl Fn(McsError) -> McsError + '_ {
    move |e| match e {
        McsError::Config(m) => McsError::Config(format!("{key}: {m}")),
        other => other,
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| McsError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes")
    }

    /// Fixes the command to run, checking it against the spec's own.
    pub fn resolve_command(&mut self, requested: Option<Command>) -> Result<Command> {
        let cmd = match (self.command, requested) {
            (Some(a), Some(b)) if a != b => {
                return Err(McsError::Config(format!(
                    "command: spec says '{}' but '{}' was requested",
                    a.as_str(),
                    b.as_str()
                )))
            }
            (_, Some(c)) | (Some(c), None) => c,
            (None, None) => return Err(missing("command")),
        };
        self.command = Some(cmd);
        self.validate()?;
        Ok(cmd)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.market {
            m.validate().map_err(at("market"))?;
        }
        self.sim.validate().map_err(at("sim"))?;
        match self.command {
            Some(Command::Discrete) if self.tree.is_none() => Err(missing("tree")),
            Some(Command::Discrete) | None => Ok(()),
            Some(_) if self.market.is_none() => Err(missing("market")),
            Some(_) => Ok(()),
        }
    }

    pub fn market(&self) -> Result<&Market> {
        self.market.as_ref().ok_or_else(|| missing("market"))
    }

    pub fn tree(&self) -> Result<ScenarioTree> {
        self.tree
            .as_ref()
            .ok_or_else(|| missing("tree"))?
            .build()
            .map_err(at("tree"))
    }

    /// PDE grid for the Vasicek market.
    pub fn grid(&self) -> Result<Grid2D> {
        let Market::Vasicek(m) = self.market()? else {
            return Err(McsError::Config("pde: needs the vasicek market regime".into()));
        };
        let default = Grid2D::around(m, self.pde.n_t, self.pde.n_r).map_err(at("pde"))?;
        Grid2D::new(
            m.horizon,
            self.pde.n_t,
            self.pde.n_r,
            self.pde.r_min.unwrap_or(default.r_min),
            self.pde.r_max.unwrap_or(default.r_max),
        )
        .map_err(at("pde"))
    }

    /// The investment strategy, tabulating the annuity hedge on `grid` when asked for.
    pub fn strategy_on(&self, grid: Option<&Grid2D>) -> Result<InvestmentStrategy> {
        let spec = self.strategy.as_ref().ok_or_else(|| missing("strategy"))?;
        match (spec, self.market()?) {
            (StrategySpec::Deterministic { pi }, _) => Ok(InvestmentStrategy::Deterministic { pi: pi.clone() }),
            (StrategySpec::State { bond, stock }, Market::Vasicek(_)) => Ok(InvestmentStrategy::State(
                StateStrategy::time_only(bond.clone(), stock.clone()),
            )),
            (StrategySpec::AnnuityHedge, Market::Vasicek(m)) => {
                let grid = match grid {
                    Some(g) => *g,
                    None => self.grid()?,
                };
                hedge_strategy(m, &annuity_certain_surface(m, &grid)?)
            }
            (_, Market::Deterministic(_)) => Err(McsError::Config(
                "strategy: state-dependent strategies need the vasicek market regime".into(),
            )),
        }
    }

    pub fn strategy(&self) -> Result<InvestmentStrategy> {
        self.strategy_on(None)
    }

    /// The consumption rule; in the Vasicek regime the martingale rule
    /// solves the PDE on `grid`.
    pub fn rule_on(&self, pi: &InvestmentStrategy, grid: Option<&Grid2D>) -> Result<ConsumptionRule> {
        let spec = self.rule.clone().unwrap_or(RuleSpec::Mcs);
        let market = self.market()?;
        match (spec, market) {
            (RuleSpec::Mcs, Market::Deterministic(_)) => Ok(ConsumptionRule::McsDeterministic {
                pi: pi.deterministic_pi().map_err(at("strategy"))?.to_vec(),
            }),
            (RuleSpec::Mcs, Market::Vasicek(m)) => {
                let grid = match grid {
                    Some(g) => *g,
                    None => self.grid()?,
                };
                Ok(ConsumptionRule::PdeSurface(Arc::clone(
                    &solve_mcs_pde(m, pi, &grid)?.field,
                )))
            }
            (RuleSpec::Merton { gamma, beta }, Market::Deterministic(dm)) => {
                let beta = match beta {
                    Some(b) => b,
                    None => martingale_beta_curve(dm, gamma).map_err(at("rule"))?,
                };
                Ok(ConsumptionRule::Merton {
                    prefs: CrraPreferences { gamma, beta },
                })
            }
            (RuleSpec::Merton { .. }, Market::Vasicek(_)) => Err(McsError::Config(
                "rule: merton needs the deterministic market regime".into(),
            )),
            (RuleSpec::AnnuityCurve { curve }, _) => Ok(ConsumptionRule::AnnuityCurve { curve }),
            (RuleSpec::AnnuityCertain, _) => Ok(ConsumptionRule::AnnuityCertain),
        }
    }

    /// Simulation settings with the command-line overrides applied.
    pub fn sim_with(&self, seed: Option<u64>, paths: Option<usize>, steps: Option<usize>) -> Result<SimConfig> {
        let mut cfg = self.sim.clone();
        if let Some(s) = seed {
            cfg.master_seed = s;
        }
        if let Some(p) = paths {
            cfg.paths = p;
        }
        if let Some(n) = steps {
            cfg.steps = n;
        }
        cfg.validate().map_err(at("sim"))?;
        Ok(cfg)
    }
}
