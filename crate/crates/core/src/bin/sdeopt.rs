use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdeopt::config::RunConfig;
use sdeopt::runner::{run, Command};

/// Monte-Carlo calibration and optimal control of SDEs with adjoint gradients.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Forward solve and ensemble statistics.
    Simulate { config: PathBuf },
    /// Optimize a time-independent parameter vector.
    Calibrate { config: PathBuf },
    /// Optimize a piecewise-constant control.
    Control { config: PathBuf },
    /// Compare the adjoint gradient with finite differences.
    Gradcheck { config: PathBuf },
    /// Discrete versus continuous cost over a list of step counts.
    Converge { config: PathBuf },
    /// Dump an equilibrated SPT ensemble.
    Equilibrate { config: PathBuf },
    /// Generate SPT correlation targets from planted parameters.
    MakeData { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, path) = match cli.command {
        Cmd::Simulate { config } => (Command::Simulate, config),
        Cmd::Calibrate { config } => (Command::Calibrate, config),
        Cmd::Control { config } => (Command::Control, config),
        Cmd::Gradcheck { config } => (Command::Gradcheck, config),
        Cmd::Converge { config } => (Command::Converge, config),
        Cmd::Equilibrate { config } => (Command::Equilibrate, config),
        Cmd::MakeData { config } => (Command::MakeData, config),
    };
    let outcome = RunConfig::load(&path).and_then(|cfg| run(&cfg, command));
    match outcome {
        Ok(out) => {
            println!("{}", out.summary);
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            if out.passed { ExitCode::SUCCESS } else { ExitCode::from(1) }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
