//! The `omni-embed` command line. Every subcommand writes one JSON report
//! (to `--out`, or stdout) and reports failures as a JSON object on stderr.

mod commands;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

pub use commands::{PipelineConfig, TRAIN_CONFIG_FILE};
pub use report::{config_hash, CliError, Report};

use crate::mining::{DEFAULT_HARD_NEGATIVES, DEFAULT_PAIR_CAP};
use crate::trainer::DistillMode;

const LONG_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("OMNI_EMBED_BUILD_HASH"), ")");

#[derive(Debug, Parser)]
#[command(name = "omni-embed", version = LONG_VERSION, about = "Omni-modal embedding training and evaluation toolkit")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = "OMNI_EMBED_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 gives the reference deterministic mode.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with twin clusters, graded labels,
    /// ID embeddings and viewing sequences.
    GenSynth(GenSynthArgs),
    /// Sweep the positive/negative threshold and select hard negatives.
    Mine(MineArgs),
    /// Weight training sets by their similarity to benchmarks.
    Balance(BalanceArgs),
    /// Run a staged training plan and write checkpoints.
    Train(TrainArgs),
    /// Compute retrieval metrics for embeddings or a checkpoint.
    Eval(EvalArgs),
    /// Simulate dataset draws from sampling weights.
    Schedule(ScheduleArgs),
    /// Align the encoder with sequences or recommender ID embeddings.
    Distill(DistillArgs),
    /// Finite-difference check of every analytic gradient.
    CheckGrads(CheckGradsArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON corpus description; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_clusters: Option<usize>,
    #[arg(long)]
    pub items_per_cluster: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub hard_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Embedding binary holding every query and target id.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Gold pairs JSONL.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Keep only pairs tagged with this split.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value_t = DEFAULT_HARD_NEGATIVES)]
    pub m: usize,
    /// Most negatives scored before uniform subsampling.
    #[arg(long, default_value_t = DEFAULT_PAIR_CAP)]
    pub cap: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    /// Training set embeddings as `name=file` (or a file, named by its stem).
    #[arg(long, num_args = 1.., required = true)]
    pub train: Vec<String>,
    /// Benchmark embeddings, same syntax.
    #[arg(long, num_args = 1.., required = true)]
    pub bench: Vec<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub temp: Option<f64>,
    /// Sinkhorn iteration cap.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Rows kept per set before clustering.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint directory; also receives `report.json` and per-stage
    /// checkpoints under `stages/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Gold pairs JSONL.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Graded labels JSONL for ranking consistency.
    #[arg(long)]
    pub graded: Option<PathBuf>,
    /// Evaluate a checkpoint on a synthetic corpus instead of stores.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "q2i")]
    pub dataset: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// `all` or a comma list of recall, separability, nmi, ranking,
    /// bijective, auc.
    #[arg(long, default_value = "all")]
    pub metrics: String,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub nmi_clusters: usize,
    /// Run the gradient certification suite instead of metrics.
    #[arg(long)]
    pub check_grads: bool,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub weights: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long, value_enum)]
    pub mode: DistillModeArg,
    /// Synthetic corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Starting checkpoint; a fresh encoder when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub aux_weight: f64,
    #[arg(long, default_value_t = 10)]
    pub seq_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the distilled checkpoint here.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum DistillModeArg {
    Seq2item,
    Id2item,
}

impl From<DistillModeArg> for DistillMode {
    fn from(m: DistillModeArg) -> Self {
        match m {
            DistillModeArg::Seq2item => DistillMode::Seq2item,
            DistillModeArg::Id2item => DistillMode::Id2item,
        }
    }
}

#[derive(Debug, Args)]
pub struct CheckGradsArgs {
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let message = e.render().to_string();
            let err = CliError::usage(message.trim().trim_start_matches("error: "));
            eprintln!("{}", err.to_json());
            return err.code;
        }
    };
    if let Some(n) = cli.workers {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", err.to_json());
            err.code
        }
    }
}
