mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ltvdw",
    version,
    about = "Watermarked simulation and replay-attack detection for time-varying linear systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build normalization tables and a detection threshold from unattacked runs
    Calibrate(CommonArgs),
    /// Simulate trials (attacked if configured) and detect against saved tables
    Run(CommonArgs),
    /// Calibrate and run across a parameter grid, one summary row per point
    Sweep(CommonArgs),
    /// Measure the watermark visibility delay for a scenario
    Kappa(CommonArgs),
    /// Check a scenario against the modeling assumptions (nonzero exit on violations)
    Validate(CommonArgs),
}

/// Shared flags. Each one overrides the matching config-file field.
#[derive(Args)]
pub struct CommonArgs {
    /// JSON experiment config; omit to start from defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// example1, vehicle, or a path to a system JSON file
    #[arg(long)]
    pub scenario: Option<String>,
    /// Sliding window length in steps
    #[arg(long)]
    pub window: Option<usize>,
    /// Target false-alarm rate
    #[arg(long)]
    pub rate: Option<f64>,
    /// Calibration ensemble size
    #[arg(long)]
    pub count: Option<usize>,
    /// Base seed all run seeds derive from
    #[arg(long)]
    pub seed: Option<u64>,
    /// Attack start time in seconds
    #[arg(long = "attack-start")]
    pub attack_start: Option<f64>,
    /// Attack blend-in duration in seconds
    #[arg(long)]
    pub blend: Option<f64>,
    /// Attack scaling factor
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (args, command): (&CommonArgs, fn(&config::ExperimentConfig) -> Result<()>) =
        match &cli.command {
            Command::Calibrate(args) => (args, commands::calibrate),
            Command::Run(args) => (args, commands::run),
            Command::Sweep(args) => (args, commands::sweep),
            Command::Kappa(args) => (args, commands::kappa),
            Command::Validate(args) => (args, commands::validate),
        };
    let effective = config::effective(args)?;
    command(&effective)
}
