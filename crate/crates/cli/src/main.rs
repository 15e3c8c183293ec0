//! `kt`: robust CP decomposition, certification and moment-based learning.
//!
//! Exit codes: 0 success, 1 input or usage error, 2 budget ran out before
//! the search finished, 3 numerical failure, 4 `certify` found the Kruskal
//! condition violated.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{GenerateKind, ModelKind, Outcome};
use config::{Overrides, Settings};

#[derive(Parser)]
#[command(name = "kt", version, about = "Robust CP tensor decomposition and moment-based learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Bounded low-rank approximation of a JSON tensor
    Decompose { tensor: PathBuf },
    /// Robust Kruskal ranks and the uniqueness condition of a decomposition
    Certify { decomposition: PathBuf },
    /// Match a candidate decomposition to a reference
    Align { reference: PathBuf, candidate: PathBuf },
    /// Learn model parameters from samples
    Learn {
        #[arg(value_enum)]
        model: ModelKind,
        /// CSV sample file; sampled from --truth when absent
        #[arg(long)]
        input: Option<PathBuf>,
        /// Ground-truth parameters (JSON) for sampling and error reporting
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Parameter error against sample size, as CSV
    Sweep {
        #[arg(value_enum)]
        model: ModelKind,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Write samples, a random decomposition or a noisy tensor
    Generate {
        #[arg(value_enum)]
        kind: GenerateKind,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Print the effective settings
    ShowConfig,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<kt_core::Error>()) {
        Some(kt_core::Error::Numerical(_) | kt_core::Error::RetriesExhausted { .. }) => 3,
        _ => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("KT_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("KT_THREADS must be a positive integer"))?;
        if n == 0 {
            anyhow::bail!("KT_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    configure_threads()?;
    let o = &cli.overrides;
    let s = Settings::resolve(o)?;
    match &cli.command {
        Command::Decompose { tensor } => commands::decompose(o, &s, tensor),
        Command::Certify { decomposition } => commands::certify(o, &s, decomposition),
        Command::Align { reference, candidate } => commands::align_cmd(o, &s, reference, candidate),
        Command::Learn { model, input, truth } => commands::learn(o, &s, *model, input.as_deref(), truth.as_deref()),
        Command::Sweep { model, truth } => commands::sweep(o, &s, *model, truth),
        Command::Generate { kind, truth } => commands::generate(o, &s, *kind, truth.as_deref()),
        Command::ShowConfig => commands::show_config(o, &s),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::BudgetPartial) => {
            eprintln!("kt: budget exhausted before the search finished; result is partial");
            ExitCode::from(2)
        }
        Ok(Outcome::ConditionFails) => ExitCode::from(4),
        Err(e) => {
            eprintln!("kt: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
