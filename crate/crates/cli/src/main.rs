//! `ftune`: pre-training, constrained fine-tuning, sweeps, analyses and
//! masked inference over the desk-scale encoder.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Invalid flag combinations detected after parsing; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "ftune", version, about = "L0-close and supermask fine-tuning of a desk-scale transformer encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key=value configuration file (see `ftune keys`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, env = "FT_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic pre-training corpus.
    GenCorpus(GenCorpusArgs),
    /// Generate a labelled task with its validity certificate.
    GenTask(GenTaskArgs),
    /// Masked-token pre-training; writes the shared checkpoint.
    Pretrain(PretrainArgs),
    /// Fine-tune one task in one mode.
    Finetune(FinetuneArgs),
    /// One fine-tuning run per (sparsity, seed) cell; writes sweep.csv.
    Sweep(SweepArgs),
    /// Parameter- and mask-space analyses as CSV.
    Analyze(AnalyzeArgs),
    /// Predict labels for token sequences with a dense or sparse engine.
    Infer(InferArgs),
    /// Replay a run from its manifest.
    Rerun(RerunArgs),
    /// List configuration keys.
    Keys,
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of sequences.
    #[arg(long, default_value_t = 8000)]
    pub size: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenTaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// parity | pattern | pair-match
    #[arg(long)]
    pub family: String,
    /// easy | hard
    #[arg(long)]
    pub difficulty: String,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub eval: usize,
    /// Pre-trained checkpoint for the frozen-feature linear probe.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus file written by gen-corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Optimizer updates (overrides the config).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    L0close,
    Supermask,
    Prune,
    HeadOnly,
    Shuffled,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Comma-separated freeze presets for l0close: key, deepest2, embed.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Initial supermask sparsity (supermask, shuffled).
    #[arg(long)]
    pub init_sparsity: Option<f64>,
    /// Final pruning sparsity (prune).
    #[arg(long)]
    pub final_sparsity: Option<f64>,
    /// Steps between pruning events (prune; overrides the config).
    #[arg(long)]
    pub prune_every: Option<usize>,
    /// Task directory written by gen-task.
    #[arg(long)]
    pub task: PathBuf,
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optimizer updates (overrides the config).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    Supermask,
    Prune,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub mode: SweepMode,
    /// Comma-separated sparsities: initial (supermask) or final (prune).
    #[arg(long)]
    pub sparsity_grid: String,
    /// Seeds per grid point, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    Distances,
    Layers,
    Overlap,
    Magnitudes,
    Powerlaw,
    LearningCurve,
    InitFinal,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceColumn {
    Angular,
    L1,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub what: Analysis,
    /// Reference (pre-trained) checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fine-tuned checkpoint compared against --checkpoint.
    #[arg(long)]
    pub against: Option<PathBuf>,
    /// Mask bundle(s) bound to --checkpoint.
    #[arg(long)]
    pub bundle: Vec<PathBuf>,
    /// Run record CSV (powerlaw, learning-curve).
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Two-column CSV of (steps, distance) points (powerlaw).
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Distance column of the run record used by powerlaw.
    #[arg(long, value_enum, default_value_t = DistanceColumn::Angular)]
    pub column: DistanceColumn,
    /// sweep.csv (init-final).
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Restrict overlap to one tensor.
    #[arg(long)]
    pub tensor: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    Dense,
    Sparse,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Flat key=value configuration file (model dimensions).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint: a fine-tuned model with head, or the reference of --bundle.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// One whitespace-separated token sequence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Engine::Dense)]
    pub engine: Engine,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the replay (defaults to the original).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::dispatch(cli.command, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        // A closed stdout (e.g. piped into `head`) is not a failure.
        Err(e)
            if e
                .downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
