use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eopd_cli::{run, ExperimentConfig, ExperimentKind, RunOptions};

/// Endless optical phase delay simulator.
#[derive(Parser)]
#[command(name = "eopd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ideal ramp drive: waveforms, monitors, phase slope and spectrum.
    Ramp(Common),
    /// Gradient-descent recovery of one drifted device.
    Calibrate(Common),
    /// Calibration over many randomly drifted devices.
    Montecarlo(Common),
    /// Carrier-phase synchronization loop with the EOPD as actuator.
    Syncloop(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used for anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the Monte-Carlo sweep.
    #[arg(long)]
    parallel: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, common) = match cli.command {
        Command::Ramp(c) => (ExperimentKind::Ramp, c),
        Command::Calibrate(c) => (ExperimentKind::Calibrate, c),
        Command::Montecarlo(c) => (ExperimentKind::Montecarlo, c),
        Command::Syncloop(c) => (ExperimentKind::Syncloop, c),
    };
    let config = match common.config.as_deref().map(ExperimentConfig::load) {
        None => Ok(ExperimentConfig::default()),
        Some(loaded) => loaded,
    };
    let result = config.and_then(|config| {
        run(RunOptions {
            kind,
            config,
            out: common.out,
            seed: common.seed,
            parallel: common.parallel,
        })
    });
    match result {
        Ok(outcome) => {
            log::info!("wrote results to {}", outcome.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("eopd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
