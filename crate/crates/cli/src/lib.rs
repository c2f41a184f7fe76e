//! The `hanorec` command line: synth → prep → hardness → sft → dpo → eval,
//! plus ablate, sweep and gradcheck.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, missing
//! inputs, pipeline-order violations), 2 on runtime failures (divergence,
//! failed gradient check, I/O).

mod commands;
mod log;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hanorec_core::corpus::Split;
use hanorec_core::{NoiseMode, Variant};

pub use log::Logger;

#[derive(Debug, Parser)]
#[command(name = "hanorec", version, about = "Hardness-aware, noise-regularized preference optimization lab")]
pub struct Cli {
    /// JSON config for the subcommand; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress informational logs.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with hardness ground truth.
    Synth(SynthArgs),
    /// Filter, split and build SFT samples and preference pairs.
    Prep(PrepArgs),
    /// Annotate preference pairs with offline hardness λ.
    Hardness(HardnessArgs),
    /// Supervised stage.
    Sft(SftArgs),
    /// Preference stage.
    Dpo(DpoArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run the five-variant ablation over several seeds.
    Ablate(AblateArgs),
    /// Grid over topk × noise_sigma × beta0.
    Sweep(SweepArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub genres: Option<usize>,
    #[arg(long)]
    pub p_amb: Option<f64>,
    /// Also write the binary embedding cache `embeddings.bin`.
    #[arg(long)]
    pub cache: bool,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Directory holding interactions.jsonl and embeddings.jsonl (and
    /// optionally items.jsonl / users.jsonl).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub interactions: Option<PathBuf>,
    /// JSONL or binary cache.
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    /// Train/validation/test ratios, e.g. `0.8,0.1,0.1`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub negatives_per_target: Option<usize>,
    #[arg(long)]
    pub min_seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HardnessArgs {
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub pairs: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub beta0: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub noise_mode: Option<NoiseMode>,
    #[arg(long)]
    pub topk: Option<usize>,
    /// Epochs of the stage being run.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub noise_samples: Option<usize>,
    #[arg(long)]
    pub dump_signals: bool,
}

#[derive(Debug, Args)]
pub struct SftArgs {
    /// Prepared data directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Continue from a supervised-stage checkpoint.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct DpoArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Supervised-stage checkpoint the reference is taken from.
    #[arg(long, value_name = "PATH")]
    pub sft: Option<PathBuf>,
    /// Preference pairs (defaults to the data directory's pairs.jsonl).
    #[arg(long, value_name = "PATH")]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Continue from a preference-stage checkpoint.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub topk_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub noise_sigma_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub beta0_values: Option<Vec<f64>>,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<hanorec_core::Error> for CliError {
    fn from(e: hanorec_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let log = Logger { quiet: cli.quiet };
    match commands::run(&cli, &log) {
        Ok(()) => 0,
        Err(e) => {
            log.error("failed", serde_json::json!({ "message": e.message(), "exit_code": e.exit_code() }));
            e.exit_code()
        }
    }
}
