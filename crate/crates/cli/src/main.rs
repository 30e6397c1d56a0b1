//! `mcse`: simulate corpora, pretrain the acoustic model, train, enhance,
//! evaluate and inspect features.
//!
//! Exit codes: 0 success, 1 user error (bad flags, config or input files),
//! 2 internal error (numerical failure, divergence, failed self-test).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use config::Preset;

/// An error caused by the invocation rather than by the toolkit.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser, Debug)]
#[command(name = "mcse", version, about = "Multi-channel speech enhancement toolkit")]
pub struct Cli {
    /// TOML configuration layered over the preset; flags override both.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,

    /// Worker threads for training and corpus evaluation.
    #[arg(long, global = true, env = "MCSE_THREADS")]
    threads: Option<usize>,

    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a multi-channel corpus.
    Simulate(commands::SimulateArgs),
    /// Pretrain the frame classifier used by the auxiliary loss.
    PretrainAm(commands::PretrainArgs),
    /// Train an enhancement model.
    Train(commands::TrainArgs),
    /// Enhance one multi-channel WAV.
    Enhance(commands::EnhanceArgs),
    /// Score a corpus before and after enhancement.
    Evaluate(commands::EvaluateArgs),
    /// Dump intermediate feature panels to CSV.
    InspectFeatures(commands::InspectArgs),
    /// Run the built-in verification suites.
    Selftest(commands::SelftestArgs),
    /// Print the resolved configuration.
    Config,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use mcse_core::Error as E;
    for cause in e.chain() {
        if cause.is::<UserError>() || cause.is::<toml::de::Error>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Numerical(_) | E::Graph(_) | E::Diverged(_) => 2,
                _ => 1,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
