//! `zofa`: pretrain fixtures, run adaptation streams, sweep ablation axes and run
//! diagnostics probes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
//! 4 numerical failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use zofa::data::ResetPolicy;
use zofa::engine::Mode;

use crate::commands::{Axis, ProbeKind};
use crate::config::FlagOverrides;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "zofa", version, about = "Two-forward zeroth-order test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,

    /// Quantize linear weights to this many bits before adapting.
    #[arg(long, global = true)]
    quantize_bits: Option<u32>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Reset policy between domains.
    #[arg(long, global = true)]
    protocol: Option<ProtocolArg>,

    /// ZOFA1 model file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    /// Override any config key, e.g. `--set adapt.eta=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    SingleDomain,
    Continual,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the fixture network and write `model.zofa` and `test.zofd`.
    Pretrain,
    /// Run one adaptation stream and write `trace.csv` and `summary.json`.
    Adapt,
    /// Run every setting of an ablation axis and write a combined CSV.
    Sweep {
        #[arg(value_enum)]
        axis: Axis,
        /// Comma-separated values of the swept quantity.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Gradient-alignment or shortcut-variance diagnostics.
    Probe {
        #[arg(value_enum)]
        kind: ProbeKind,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

/// `ZOFA_THREADS` when set to a positive integer, otherwise the available cores.
fn threads() -> Result<usize, CliError> {
    match std::env::var("ZOFA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("ZOFA_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = cli.common;
    let flags = FlagOverrides {
        seed: c.seed,
        mode: c.mode,
        quantize_bits: c.quantize_bits,
        out: c.out,
        protocol: c.protocol.map(|p| match p {
            ProtocolArg::SingleDomain => ResetPolicy::SingleDomain,
            ProtocolArg::Continual => ResetPolicy::Continual,
        }),
        model: c.model,
        set: c.set,
    };
    let mut cfg = config::load(c.config.as_deref(), std::env::vars(), &flags)?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Adapt => commands::adapt(&cfg).map(|_| ()),
        Command::Sweep { axis, values } => {
            if !values.is_empty() {
                cfg.sweep.values = values;
            }
            commands::sweep(&cfg, axis, threads()?).map(|_| ())
        }
        Command::Probe { kind } => commands::probe(&cfg, kind).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
