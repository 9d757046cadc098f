use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coordlqr::cli::{self, CommandOutput, Overrides};
use coordlqr::config::RunConfig;

/// Distributed LQ synthesis, stabilization tests, simulation and
/// verification for ensembles coupled through a weighted-average constraint.
#[derive(Parser)]
#[command(name = "coordlqr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Finite synthesis horizon N (overrides the config).
    #[arg(long)]
    horizon: Option<usize>,
    /// Simulation step count (overrides the config).
    #[arg(long)]
    steps: Option<usize>,
    /// Seed of the randomized verification campaign.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides [outputs].dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute distributed gains: a finite schedule with --horizon, the
    /// steady solution otherwise.
    Synthesize(Common),
    /// Run the closed loop and write trajectory CSVs plus a summary.
    Simulate(Common),
    /// Check the synthesis against the KKT oracle and the maximum
    /// principle, then run a seeded randomized campaign.
    Verify(Common),
    /// Evaluate the stabilization tests only.
    Report(Common),
}

type CommandFn = fn(&RunConfig, &Overrides) -> Result<CommandOutput, cli::CliError>;

fn main() -> ExitCode {
    let parsed = Cli::parse();
    let (common, run): (&Common, CommandFn) = match &parsed.command {
        Command::Synthesize(c) => (c, cli::cmd_synthesize),
        Command::Simulate(c) => (c, cli::cmd_simulate),
        Command::Verify(c) => (c, cli::cmd_verify),
        Command::Report(c) => (c, cli::cmd_report),
    };

    let cfg = match RunConfig::from_path(&common.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(cli::EXIT_INPUT_ERROR as u8);
        }
    };
    let overrides = Overrides {
        horizon: common.horizon,
        steps: common.steps,
        seed: common.seed,
        out: common.out.clone(),
    };

    match run(&cfg, &overrides) {
        Ok(output) => {
            println!("{:#}", output.report);
            ExitCode::from(output.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code as u8)
        }
    }
}
