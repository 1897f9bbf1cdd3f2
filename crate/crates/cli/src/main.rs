use std::path::PathBuf;
use std::process::ExitCode;

use basis_core::env::ValueDistribution;
use basis_core::estimators::{Family, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod manifest;

/// A bad flag or option value; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "basis", version, about = "Simulate and compare policy-gradient baseline estimators on synthetic prompts")]
pub struct Cli {
    /// Directory for artifacts and the run manifest
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// Worker threads (default: all cores); outputs do not depend on it
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Flat key = value file supplying defaults for any long option
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic prompt population
    GenPop(GenPopArgs),
    /// Build the reference value table for a population
    GenValues(GenValuesArgs),
    /// Run an estimator-quality protocol
    Diagnose(DiagnoseArgs),
    /// Calibrate the tilt on repeated batches and record the selections
    CalibrateSweep(CalibrateArgs),
    /// Train the toy policy with one advantage estimator
    Train(TrainArgs),
}

#[derive(Debug, Args)]
pub struct GenPopArgs {
    /// Number of prompts
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub count: Option<u32>,
    /// Value distribution: uniform:LO,HI | beta:A,B | two-cluster:LOW,HIGH,MIX
    #[arg(long)]
    pub dist: Option<ValueDistribution>,
    /// Answers per prompt
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file name inside the output directory
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenValuesArgs {
    /// Population file
    #[arg(long)]
    pub pop: Option<PathBuf>,
    /// Reference rollouts per prompt
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub n: Option<u32>,
    /// Comma-separated tilt grid (default: the 230-point grid)
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    GroupSweep,
    Heterogeneity,
    Difficulty,
    BetaCurve,
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Self as ValueEnum>::from_str(s, false)
    }
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::GroupSweep => "group-sweep",
            Protocol::Heterogeneity => "heterogeneity",
            Protocol::Difficulty => "difficulty",
            Protocol::BetaCurve => "beta-curve",
        }
    }
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub pop: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Option<Protocol>,
    /// Batch size
    #[arg(long = "B", value_parser = clap::value_parser!(u32).range(2..))]
    pub batch_size: Option<u32>,
    /// Repeats (group sweep, difficulty, beta curve)
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub repeats: Option<u32>,
    /// Batches for the heterogeneity protocol
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub batches: Option<u32>,
    /// Heterogeneity bins
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub bins: Option<u32>,
    /// Comma-separated group sizes for GRPO and RLOO
    #[arg(long)]
    pub group_sizes: Option<String>,
    /// Tilt the current policy away from the reference at this strength
    #[arg(long)]
    pub drift_beta: Option<f64>,
    /// Score against Monte-Carlo values from this many rollouts instead of
    /// exact values
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub oracle_rollouts: Option<u32>,
    /// Batchwise variant for the beta curve
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub pop: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long = "B", value_parser = clap::value_parser!(u32).range(2..))]
    pub batch_size: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub trials: Option<u32>,
    /// Draw rewards from the reference policy tilted at this strength
    #[arg(long)]
    pub drift_beta: Option<f64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub pop: Option<PathBuf>,
    /// Value table (required for the basis family)
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// zero | grpo | rloo | reinforcepp | basis
    #[arg(long, alias = "estimator")]
    pub family: Option<Family>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub steps: Option<u32>,
    #[arg(long = "B", value_parser = clap::value_parser!(u32).range(1..))]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub eval_every: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let usage = err.downcast_ref::<UsageError>().is_some();
            eprintln!("error: {err:#}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
