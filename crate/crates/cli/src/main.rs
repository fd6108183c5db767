//! `gode` — operator surface for the post-training-convolution recommender.
//!
//! One command per process: prepare → train → convolve → eval, plus sweep /
//! bench / variants for the experiment tables and `synth` for generating
//! deterministic toy data. Exit codes: 0 success, 1 internal error, 2
//! usage or input error.

mod commands;
mod config;

use std::io::ErrorKind;
use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use gode_core::Error;

#[derive(Debug, Parser)]
#[command(name = "gode", version, about = "Train-then-convolve recommender pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest a raw interaction log: k-core filter, split, persist.
    Prepare(PrepareArgs),
    /// Train embeddings; write best-epoch checkpoint and training log.
    Train(TrainArgs),
    /// Apply graph convolution to a trained checkpoint.
    Convolve(ConvolveArgs),
    /// Full-ranking Recall@K / NDCG@K for a checkpoint.
    Eval(EvalArgs),
    /// Metric and discrepancy curves over a t, gamma or K grid.
    Sweep(SweepArgs),
    /// Seconds-per-epoch comparison: convolution-free vs in-training GCN.
    Bench(BenchArgs),
    /// Four-way comparison of training paradigms on one dataset.
    Variants(VariantsArgs),
    /// Generate a deterministic synthetic interaction log.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw interaction TSV: `user<TAB>item[<TAB>timestamp]`.
    #[arg(long)]
    input: PathBuf,
    /// Config file (`key = value` lines, `[prepare]` section).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drop users/items with fewer than this many interactions.
    #[arg(long)]
    k_core: Option<u32>,
    /// Train/valid/test ratios, comma-separated, summing to 1.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every command that trains embeddings.
#[derive(Debug, Args, Clone)]
pub struct TrainFlags {
    /// Config file (`key = value` lines, `[train]` section).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training paradigm: `mf` (convolution-free) or `gcn` (in-training).
    #[arg(long)]
    mode: Option<String>,
    /// Uniformity weight γ.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Non-improving validation epochs tolerated before early stopping.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Convolution layers for `gcn` mode.
    #[arg(long = "K")]
    k: Option<u32>,
    /// Output directory for checkpoint.bin and train_log.csv.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every command that applies post-training convolution.
#[derive(Debug, Args, Clone)]
pub struct ConvFlags {
    /// Convolution operator: `discrete`, `discrete_sl` or `ode`.
    #[arg(long)]
    conv: Option<String>,
    /// Layer count for the discrete operators.
    #[arg(long = "K")]
    k: Option<u32>,
    /// Integration horizon for the ODE operator.
    #[arg(long)]
    t: Option<f64>,
    /// Euler step size.
    #[arg(long)]
    dt: Option<f64>,
    /// Readout for the discrete operators: `layer_sum` or `last_layer`.
    #[arg(long)]
    readout: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConvolveArgs {
    /// Trained checkpoint to convolve.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset directory (supplies the interaction graph).
    #[arg(long)]
    dataset: PathBuf,
    /// Config file (`key = value` lines, `[conv]` section).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    conv: ConvFlags,
    /// Output checkpoint path; a `<out>.json` sidecar records the operator.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Config file (`key = value` lines, `[eval]` section).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cutoffs, comma-separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// `test` (mask train+valid) or `validation` (mask train).
    #[arg(long)]
    split: Option<String>,
    /// Optional metrics CSV path; stdout always gets the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid variable: `t`, `gamma` or `K`.
    #[arg(long)]
    grid: String,
    /// Grid values, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    dataset: PathBuf,
    /// Trained checkpoint; required for t and K sweeps, ignored for gamma
    /// (which retrains per value).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    conv: ConvFlags,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Optional CSV path; stdout gets the CSV either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Timed epochs per mode.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[command(flatten)]
    train: TrainFlags,
    /// Convolution layers for the `gcn` side of the comparison.
    #[arg(long = "K")]
    k: Option<u32>,
    /// Optional CSV path; stdout gets the CSV either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VariantsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Optional CSV path; stdout gets the CSV either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `tiny` (40 users) or `desk` (700 users).
    #[arg(long, default_value = "tiny")]
    scale: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
}

/// `GODE_THREADS` caps internal parallelism for the whole process.
fn init_threads() -> Result<(), Error> {
    match std::env::var("GODE_THREADS") {
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("GODE_THREADS = `{raw}` is not a thread count"))
            })?;
            if n == 0 {
                return Err(Error::InvalidConfig("GODE_THREADS must be >= 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
        }
        Err(_) => Ok(()),
    }
}

/// 2 for anything the operator can fix (paths, formats, configuration),
/// 1 for internal numeric failures.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(e) => match e.kind() {
            ErrorKind::NotFound | ErrorKind::PermissionDenied => 2,
            _ => 1,
        },
        Error::NonFinite { .. } | Error::ZeroNormRow { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prepare(args) => commands::cmd_prepare(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Convolve(args) => commands::cmd_convolve(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Sweep(args) => commands::cmd_sweep(args),
        Command::Bench(args) => commands::cmd_bench(args),
        Command::Variants(args) => commands::cmd_variants(args),
        Command::Synth(args) => commands::cmd_synth(args),
    }
}

fn main() {
    let cli = Cli::parse();
    let status = init_threads().and_then(|()| run(cli));
    if let Err(err) = status {
        eprintln!("error: {err}");
        process::exit(exit_code(&err));
    }
}
