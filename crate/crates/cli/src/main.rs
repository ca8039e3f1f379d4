//! `pairalign` command line: dataset generation, pretraining, memory
//! construction, adaptation, evaluation, ablation suites and reports.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime or numerical error.

mod commands;
mod config;
mod record;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pairalign::memory::SubsampleMethod;

/// Marks an error as a validation failure (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

#[derive(Parser, Debug)]
#[command(name = "pairalign", version, about = "Memory-based pair alignment for cross-domain detection")]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 keeps the default pool).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON experiment config; unset sections keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Coreset,
    Random,
}

impl From<MethodArg> for SubsampleMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Coreset => SubsampleMethod::Coreset,
            MethodArg::Random => SubsampleMethod::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Svg,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic two-domain benchmark.
    GenData {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Fog intensity of the target domain.
        #[arg(long)]
        fog: Option<f64>,
    },
    /// Train a detector on the labelled source split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Extract foreground and background memories with a trained detector.
    BuildMemory {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Alignment mode the memory is for; provenance modes also store
        /// the unselected family members.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Reduce a memory snapshot.
    Subsample {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, default_value_t = 0.5)]
        keep_fg: f64,
        #[arg(long, default_value_t = 0.3)]
        keep_bg: f64,
    },
    /// Adapt a pretrained detector to the target split.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Prebuilt memory snapshot; built on the fly when absent.
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a detector on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Target)]
        split: SplitArg,
        /// Score threshold; defaults to the config's eval_delta.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Run an ablation suite over several seeds.
    Ablate {
        #[arg(long)]
        suite: String,
        /// Number of seeds, counted up from --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Render records as CSV tables or SVG charts.
    Report {
        /// Record files or directories holding a record.json.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        format: FormatArg,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use pairalign::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Validation(_)
                | E::Argument(_)
                | E::Usage(_)
                | E::Format { .. }
                | E::NotFound(_)
                | E::Precondition(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PAIRALIGN_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
