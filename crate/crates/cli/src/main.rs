//! `spmdfuzz`: compile, run, fuzz, benchmark and score SPMD kernels.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spmdfuzz::fuzz::FuzzError;
use spmdfuzz::kir::{GridError, KirError};
use spmdfuzz::pact::PactError;

/// Failure classes, each with a stable exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Kir(#[from] KirError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Pact(#[from] PactError),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Fuzz(#[from] FuzzError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Kir(e) if e.is_syntax() => 1,
            CliError::Kir(_) | CliError::Grid(_) | CliError::Pact(_) | CliError::Validation(_) => 2,
            CliError::Fuzz(FuzzError::Compile(_) | FuzzError::NoSeeds | FuzzError::HarnessSetup { .. }) => 2,
            CliError::Fuzz(_) | CliError::Io(_) | CliError::Internal(_) => 4,
        }
    }
}

pub const EXIT_BUG: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "spmdfuzz", version, about = "Memory-safety fuzzing for SPMD kernels on a CPU interpreter")]
pub struct Cli {
    /// `key = value` settings file; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: Flags,
    #[command(subcommand)]
    pub cmd: Command,
}

/// Settings shared by every subcommand. Unset flags fall back to the
/// config file and then to the defaults.
#[derive(Args, Debug, Default)]
pub struct Flags {
    /// Number of blocks.
    #[arg(long, global = true)]
    pub blocks: Option<String>,
    /// Threads per block.
    #[arg(long, global = true)]
    pub threads: Option<String>,
    /// Dynamic shared memory bytes per block.
    #[arg(long, global = true)]
    pub dyn_shared: Option<String>,
    /// Detector: exact, redzone or reference.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Representative-thread execution: on or off.
    #[arg(long, global = true)]
    pub prex: Option<String>,
    /// Check pruning: on or off.
    #[arg(long, global = true)]
    pub axiprune: Option<String>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// Fuzzing execution budget.
    #[arg(long = "budget-execs", alias = "budget", global = true)]
    pub budget: Option<String>,
    /// Fuzzing wall-clock budget in seconds.
    #[arg(long, global = true)]
    pub time: Option<String>,
    /// Fuzzing executor threads.
    #[arg(long, global = true)]
    pub workers: Option<String>,
    /// Per-execution timeout in milliseconds.
    #[arg(long, global = true)]
    pub timeout_ms: Option<String>,
    /// Upper bound on blocks derived from inputs.
    #[arg(long, global = true)]
    pub max_blocks: Option<String>,
    /// Benchmark repetitions per configuration.
    #[arg(long, global = true)]
    pub reps: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<String>,
    /// Report format: text or jsonl.
    #[arg(long, global = true)]
    pub format: Option<String>,
}

impl Flags {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let all = [
            ("blocks", &self.blocks),
            ("threads", &self.threads),
            ("dyn_shared", &self.dyn_shared),
            ("mode", &self.mode),
            ("prex", &self.prex),
            ("axiprune", &self.axiprune),
            ("seed", &self.seed),
            ("budget", &self.budget),
            ("time", &self.time),
            ("workers", &self.workers),
            ("timeout_ms", &self.timeout_ms),
            ("max_blocks", &self.max_blocks),
            ("reps", &self.reps),
            ("out", &self.out),
            ("format", &self.format),
        ];
        all.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))).collect()
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Prune, analyze and lower a kernel, writing the artifacts to --out.
    Compile {
        kernel: PathBuf,
        /// Also print the affine summary.
        #[arg(long)]
        dump_affine: bool,
        /// Also print the lowered program.
        #[arg(long)]
        emit_lowered: bool,
        /// Also print the prune report.
        #[arg(long)]
        dump_prune_report: bool,
    },
    /// Execute a kernel once on an input blob and print sanitizer reports.
    Run {
        kernel: PathBuf,
        /// Input blob; zero-filled buffers of one element per thread when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Minimum buffer length as NAME=ELEMS.
        #[arg(long, value_name = "NAME=ELEMS")]
        min_elems: Vec<String>,
    },
    /// Run a coverage-guided campaign and write its directory to --out.
    Fuzz {
        kernel: PathBuf,
        /// Seed blob; may be repeated.
        #[arg(long)]
        seed_input: Vec<PathBuf>,
        /// Minimum buffer length as NAME=ELEMS.
        #[arg(long, value_name = "NAME=ELEMS")]
        min_elems: Vec<String>,
        /// Derive blocks as ceil(PARAM / threads) for each input.
        #[arg(long, value_name = "PARAM")]
        grid_param: Option<String>,
    },
    /// Compare baseline, PREX and PREX with pruning on one input.
    Bench {
        kernel: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_name = "NAME=ELEMS")]
        min_elems: Vec<String>,
    },
    /// Generate the memory-safety benchmark and score the detectors.
    Gms,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
