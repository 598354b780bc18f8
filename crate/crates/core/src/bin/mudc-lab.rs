//! Command-line front end for the simulation lab.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use mudc::harness::{emit_report, run, ExperimentKind, Scenario};
use mudc::Error;

#[derive(Parser)]
#[command(name = "mudc-lab", version, about = "Distributed random-feature computing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed topology, fresh encoder and data per trial.
    Quenched(RunArgs),
    /// Independent topology draws, optionally swept over server counts.
    Annealed(RunArgs),
    /// Spectral gap against the Marchenko–Pastur benchmark.
    MpGap(RunArgs),
    /// Bound evaluation only, no decoder training.
    Bounds(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn execute(kind: ExperimentKind, args: RunArgs) -> mudc::Result<()> {
    let mut scenario = Scenario::load(&args.config)?;
    scenario.kind = kind;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(trials) = args.trials {
        scenario.trials = trials;
    }
    let scenario = scenario.resolve()?;
    info!("running {} with seed {}", kind.stem(), scenario.seed);
    let outcome = run(&scenario, args.threads)?;
    for path in emit_report(&outcome, &args.out)? {
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Quenched(a) => (ExperimentKind::Quenched, a),
        Command::Annealed(a) => (ExperimentKind::Annealed, a),
        Command::MpGap(a) => (ExperimentKind::MpGap, a),
        Command::Bounds(a) => (ExperimentKind::BoundsOnly, a),
    };
    match execute(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
