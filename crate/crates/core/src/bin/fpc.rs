//! Command-line front end. Every subcommand runs the matching pipeline from a TOML
//! configuration and writes CSV tables, `summary.txt` and `manifest.json` to `--out`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpc_core::io::{run_experiment, Pipeline, RunOptions};

#[derive(Parser)]
#[command(name = "fpc", version, about = "Fractional parabolic operators and exterior-data inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker count recorded in the manifest.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble (or load from cache) the spatial eigenbasis.
    Assemble(Common),
    /// Solve the forward problem.
    Forward(Common),
    /// Solve the adjoint problem with the configured exterior data.
    Adjoint(Common),
    /// Assemble the Dirichlet-to-Neumann matrix between two patches.
    Dn(Common),
    /// Recover coefficients from synthetic DN data.
    Recover(Common),
    /// Compute the extension of the forward solution.
    Extend(Common),
    /// Runge approximation residuals.
    Runge(Common),
    /// Run the inequality batteries.
    Verify(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (pipeline, c) = match cli.command {
        Command::Assemble(c) => (Pipeline::Assemble, c),
        Command::Forward(c) => (Pipeline::Forward, c),
        Command::Adjoint(c) => (Pipeline::Adjoint, c),
        Command::Dn(c) => (Pipeline::Dn, c),
        Command::Recover(c) => (Pipeline::Recover, c),
        Command::Extend(c) => (Pipeline::Extend, c),
        Command::Runge(c) => (Pipeline::Runge, c),
        Command::Verify(c) => (Pipeline::Verify, c),
    };
    let opts = RunOptions { pipeline: Some(pipeline), seed: c.seed, threads: Some(c.threads) };
    match run_experiment(&c.config, &c.out, &opts) {
        Ok(m) => {
            log::info!("config_hash={}", m.config_hash);
            for o in &m.outputs {
                println!("{} {}", o.sha256, c.out.join(&o.path).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
