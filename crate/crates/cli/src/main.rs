use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod eval;
mod failure;
mod gradcheck;
mod make_data;
mod output;
mod simulate;
mod train;

use config::StrategyName;

/// Dynamic multi-task loss weighting experiments.
#[derive(Parser)]
#[command(name = "dwmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network and weight generator; writes trace.csv,
    /// checkpoint.bin, and summary.json to the output directory.
    Train(train::TrainArgs),
    /// Replay generator updates under frozen task losses.
    Simulate(simulate::SimulateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Verification and identification metrics for an embeddings CSV.
    Eval(eval::EvalArgs),
    /// Export the synthetic tasks of a config as per-task CSV files.
    MakeData(make_data::MakeDataArgs),
}

/// Config shared by `train` and `make-data`.
#[derive(clap::Args)]
pub struct ConfigArgs {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    /// Loads the config and applies the `DWMT_SEED` override.
    fn load(&self) -> failure::CliResult<config::ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::ExperimentConfig::load(p)?,
            None => config::ExperimentConfig::default(),
        };
        if let Ok(s) = std::env::var("DWMT_SEED") {
            cfg.seed = s.trim().parse().map_err(|_| {
                failure::Failure::input(format!("DWMT_SEED: `{s}` is not an unsigned integer"))
            })?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Eval(a) => eval::run(a),
        Command::MakeData(a) => make_data::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

pub(crate) fn strategy_label(s: StrategyName) -> &'static str {
    match s {
        StrategyName::Dynamic => "dynamic",
        StrategyName::Naive => "naive",
        StrategyName::Fixed => "fixed",
        StrategyName::Single => "single",
    }
}
