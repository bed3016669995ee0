//! Experiment runner behind the `mcs` binary.
//!
//! Each run reads a TOML [`ExperimentSpec`], applies the command-line
//! overrides, and writes one directory of CSVs plus `spec.toml` and
//! `manifest.toml`. Artifacts depend only on the resolved spec, so the same
//! spec and seed reproduce them byte for byte.

mod commands;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mcs_core::{Command, ExperimentSpec, McsError};
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_MARTINGALE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mcs", version, about = "Martingale consumption experiments")]
pub struct Args {
    #[command(subcommand)]
    pub command: Cmd,
    /// Experiment spec (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for the Monte Carlo streams.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: the spec's `output`, else `mcs-out/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Grid doublings for `pde` and `convergence`.
    #[arg(long, global = true)]
    pub refine: Option<u32>,
    /// Exit with status 4 when a simulated martingale test rejects.
    #[arg(long, global = true)]
    pub assert_martingale: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Cmd {
    /// Wealth-to-consumption factor Z(t) of the configured rule.
    Factor,
    /// Monte Carlo paths with martingale, exhaustion and volatility diagnostics.
    Simulate,
    /// Solve the factor PDE of the stochastic-rate model.
    Pde,
    /// Annuity certain: closed form against its PDE.
    Annuity,
    /// Discrete-time recursion on a scenario tree.
    Discrete,
    /// Martingale rule against the CRRA-optimal rule.
    CompareMerton,
    /// Refinement tables for the PDE and the exhaustion statistic.
    Convergence,
    /// Run the command named in the spec.
    Run,
}

impl Cmd {
    fn command(self) -> Option<Command> {
        Some(match self {
            Cmd::Factor => Command::Factor,
            Cmd::Simulate => Command::Simulate,
            Cmd::Pde => Command::Pde,
            Cmd::Annuity => Command::Annuity,
            Cmd::Discrete => Command::Discrete,
            Cmd::CompareMerton => Command::CompareMerton,
            Cmd::Convergence => Command::Convergence,
            Cmd::Run => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] McsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("writing output: {0}")]
    Output(String),
    #[error("martingale test rejected: max |z| = {max_abs_z:.3} > {threshold}")]
    MartingaleRejected { max_abs_z: f64, threshold: f64 },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn csv(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(e) => match e {
                McsError::Config(_)
                | McsError::InvalidGrid(_)
                | McsError::InvalidTree(_)
                | McsError::OutOfHorizon { .. }
                | McsError::Domain(_)
                | McsError::Preference(_)
                | McsError::Breakpoint(_) => EXIT_CONFIG,
                McsError::SingularVolatility { .. }
                | McsError::Rule { .. }
                | McsError::NumericalBlowup { .. }
                | McsError::NonlinearIteration { .. }
                | McsError::PositivityLoss { .. }
                | McsError::Spanning { .. }
                | McsError::DegenerateReturn { .. } => EXIT_NUMERICAL,
            },
            CliError::Io { .. } | CliError::Output(_) => EXIT_CONFIG,
            CliError::MartingaleRejected { .. } => EXIT_MARTINGALE,
        }
    }
}

/// Loads the spec, applies overrides and runs the command; returns the
/// output directory.
pub fn run(args: &Args) -> Result<PathBuf, CliError> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| McsError::Config("--config: missing".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut spec = ExperimentSpec::from_toml(&text)?;
    let command = spec.resolve_command(args.command.command())?;
    spec.sim = spec.sim_with(args.seed, args.paths, args.steps)?;
    if let Some(k) = args.refine {
        spec.refine = k;
    }
    let dir = args
        .out
        .clone()
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| PathBuf::from("mcs-out").join(command.as_str()));
    // the output location is not part of the experiment's identity
    spec.output = None;
    let canonical = spec.to_toml();
    let mut art = output::Artifacts::create(&dir, command.as_str(), &canonical, spec.sim.master_seed)?;
    let verdict = commands::dispatch(command, &spec, &mut art, args.assert_martingale);
    if let Err(e) = &verdict {
        art.note("error", e.to_string());
        art.note("exit_code", e.exit_code() as i64);
    }
    let dir = art.finish()?;
    verdict.map(|()| dir)
}
