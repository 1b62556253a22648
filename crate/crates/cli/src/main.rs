//! `featreg` command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning                                      |
//! |------|----------------------------------------------|
//! | 0    | success                                      |
//! | 2    | command-line usage error                     |
//! | 3    | invalid configuration or parameter value     |
//! | 4    | file could not be read, written or parsed    |
//! | 5    | inconsistent input data                      |
//! | 6    | sampling failure (too few valid samples)     |
//! | 7    | numerical failure (divergence, non-finite)   |

mod ablate;
mod evaluate;
mod features;
mod output;
mod phantom;
mod register;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use featreg_core::Error;

#[derive(Parser, Debug)]
#[command(name = "featreg", version, about = "Feature-based 3D deformable image registration")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register a moving image onto a fixed image.
    Register(register::RegisterArgs),
    /// TRE, Dice, HD95 and Jacobian statistics of a transform.
    Evaluate(evaluate::EvaluateArgs),
    /// Generate a synthetic phantom pair with known deformation.
    Phantom(phantom::PhantomArgs),
    /// Precompute dense feature maps or check external ones.
    Features(features::FeaturesArgs),
    /// Run a grid of settings over a set of cases and tabulate TRE.
    Ablate(ablate::AblateArgs),
}

/// Stable exit code of each failure class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Choice { .. } => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Unsupported { .. } => 4,
        Error::InvalidData(_) => 5,
        Error::Sampling(_) => 6,
        Error::Numerical(_) => 7,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = match &cli.command {
        Command::Register(a) => register::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Phantom(a) => phantom::run(a),
        Command::Features(a) => features::run(a),
        Command::Ablate(a) => ablate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("featreg: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
