use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Multi-head vs deep single-head transformer toolkit.
#[derive(Debug, Parser)]
#[command(name = "headfold", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the attention / feedforward decomposition identities and gradients.
    Verify(VerifyArgs),
    /// Parameter and FLOP counts for a model and its deep single-head reconstruction.
    Count(CountArgs),
    /// Train one model per seed and write a CSV per run.
    Train(TrainArgs),
    /// Stability sweep (shallow vs reconstructed, per init) or head-count sweep.
    Sweep(SweepArgs),
    /// Print the tables of the JSON summaries in an output directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// `γH-αL` / `γH-αL-βL` shorthand, or a path to a TOML config file.
    #[arg(long)]
    pub model: Option<String>,
    /// Profile that fills in the dimensions a shorthand leaves open.
    #[arg(long, default_value = "desk")]
    pub defaults: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Seeds: `0..19` (inclusive) or a comma list.
    #[arg(long, default_value = "0..19")]
    pub seeds: String,
    /// Run every check at this one sequence length instead of 1, 3 and 17.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Replace every check's tolerance with this one.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 512)]
    pub seq_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Init schemes, comma separated: vanilla (= xavier), truncated-normal, admin, admin-truncated-normal.
    #[arg(long = "init", visible_alias = "inits", default_value = "vanilla")]
    pub init: String,
    /// Seeds: `0..4` (inclusive) or a comma list.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    #[arg(long, default_value = "copy")]
    pub task: String,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Parallel training runs; HEADFOLD_WORKERS takes precedence.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Replace one gradient entry with NaN at this step.
    #[arg(long)]
    pub inject_nan_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Stability,
    Heads,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = SweepKind::Stability)]
    pub kind: SweepKind,
    /// Head counts of a head sweep, comma separated.
    #[arg(long, default_value = "1,2,4")]
    pub heads: String,
    /// Init of the deep models in a head sweep (`--init` sets the shallow ones).
    #[arg(long, default_value = "admin")]
    pub deep_init: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(outcome) => ExitCode::from(outcome as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
