//! `lineage`: run query plans inside the cluster simulator, sweep
//! ablations and verify audit logs offline.
//!
//! Every flag has an environment override named `LINEAGE_<FLAG>`
//! (`LINEAGE_PLAN`, `LINEAGE_WORKERS`, ...). Precedence: flag, then
//! environment, then the `--config` file, then built-in defaults.

mod ablate;
mod run;
mod verify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

const EXIT_CODES: &str = "\
Exit status:
  0  success
  1  unreadable or invalid input (plan, config, log)
  2  command-line usage error
  3  the audit found invariant violations
  4  the simulation failed (unrecoverable partition, deadlock, no live workers)";

#[derive(Parser)]
#[command(name = "lineage", version, about, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one plan and write result.digest, metrics.txt, metrics.json and
    /// audit.log to the output directory.
    Run(run::RunArgs),
    /// Sweep strategies x batching policies x worker counts and print one
    /// row per cell.
    Ablate(ablate::AblateArgs),
    /// Re-check the invariants of an audit log.
    Verify(verify::VerifyArgs),
}

/// Why a command failed. Each variant maps to one exit status.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Violations(Vec<String>),
    Simulation(String),
}

impl Failure {
    fn report(&self) -> ExitCode {
        match self {
            Failure::Input(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
            Failure::Violations(lines) => {
                for l in lines {
                    eprintln!("violation: {l}");
                }
                eprintln!("error: audit found {} violation(s)", lines.len());
                ExitCode::from(3)
            }
            Failure::Simulation(msg) => {
                eprintln!("error: simulation failed: {msg}");
                ExitCode::from(4)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(&args),
        Command::Ablate(args) => ablate::cmd_ablate(&args),
        Command::Verify(args) => verify::cmd_verify(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
