use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use illiquid_cli::{run, Command, Overrides};

#[derive(Parser)]
#[command(name = "illiquid", version, about = "Optimal investment with random trading times")]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Solve for phi and write phi.csv, policy.csv and convergence.json.
    Solve(Args),
    /// Liquid benchmark only (merton.json).
    Merton(Args),
    /// Cost of liquidity, optionally over a sweep of intensities (cost.json).
    Cost(Args),
    /// Monte Carlo checks of the solved policy (sim.json).
    Simulate(Args),
    /// Parse and check the config without solving.
    Validate(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Run configuration (TOML, or JSON such as a resolved_config.json).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with `lambda = [...]` points, overriding `[sweep]`.
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Monte Carlo seed, overriding `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid size, overriding `grid.n_points`.
    #[arg(long)]
    grid_points: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let (command, args) = match cli.command {
        Verb::Solve(a) => (Command::Solve, a),
        Verb::Merton(a) => (Command::Merton, a),
        Verb::Cost(a) => (Command::Cost, a),
        Verb::Simulate(a) => (Command::Simulate, a),
        Verb::Validate(a) => (Command::Validate, a),
    };
    let overrides = Overrides {
        out: args.out,
        sweep: args.sweep,
        seed: args.seed,
        grid_points: args.grid_points,
    };
    match run(command, &args.config, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
