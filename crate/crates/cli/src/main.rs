//! `touchmoe`: data generation, two-stage training, evaluation and routing
//! analysis for the touch-language mixture-of-experts model.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage or configuration error, including checkpoint/config mismatch |
//! | 3 | malformed input data or checkpoint |
//! | 4 | filesystem error |
//! | 5 | stage-order or dependency error, e.g. stage II without `--from` |
//! | 6 | numeric or shape failure |
//! | 7 | judge or network failure |

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use touchmoe_core::ErrorCategory;

pub const BUILD_ID: &str = env!("TOUCHMOE_BUILD_ID");

#[derive(Parser, Debug)]
#[command(name = "touchmoe", version, about = "Touch-language MoE model: data, training, evaluation, analysis")]
#[command(after_help = "Exit codes: 0 ok, 2 config/usage, 3 data, 4 io, 5 stage order/dependency, 6 numeric, 7 judge/network")]
struct Cli {
    /// Log debug messages to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    /// Only log warnings and errors to stderr.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tactile-conversation corpus.
    GenData(GenDataArgs),
    /// Stage I: train the tactile adapter against the frozen language model.
    TrainStage1(TrainArgs),
    /// Stage II: upcycle a stage I model to MoE and fine-tune it.
    TrainStage2(Stage2Args),
    /// Generate answers for a dataset and score them.
    Eval(EvalArgs),
    /// Export expert distributions and top token pathways of an MoE model.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Generator spec (TOML): seed, counts, frame_size, frames, latent_ranges, texture.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; receives dataset.jsonl and frames/.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (TOML); see configs/default.toml.
    #[arg(long)]
    config: PathBuf,
    /// Training dataset (JSONL written by gen-data or in the same format).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed and model.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Write a resumable checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a resumable checkpoint of the same run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Stage2Args {
    #[command(flatten)]
    train: TrainArgs,
    /// Stage I checkpoint to upcycle.
    #[arg(long, conflicts_with = "skip_stage1")]
    from: Option<PathBuf>,
    /// Ablation: start stage II from a freshly initialized model.
    #[arg(long)]
    skip_stage1: bool,
    /// Ablation: keep the dense FFN (trainable, with LoRA) instead of upcycling.
    #[arg(long)]
    dense: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation dataset.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; receives report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated metrics: bleu4, cider, meteor, conclusion.
    #[arg(long, default_value = "bleu4,cider,meteor")]
    metrics: String,
    /// Judge configuration (TOML). Repeat for several judges. Without it
    /// evaluation makes no network requests.
    #[arg(long)]
    judge: Vec<PathBuf>,
    /// Longest generated answer, in tokens.
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Add-one smoothing for BLEU-4 (n >= 2).
    #[arg(long)]
    bleu_smoothing: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Stage II (MoE) checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset whose routing is traced.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; receives traces.json and the exports.
    #[arg(long)]
    out: PathBuf,
    /// Number of token pathways to extract.
    #[arg(long, default_value_t = 10)]
    pathways: usize,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

pub fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Io => 4,
        ErrorCategory::Dependency => 5,
        ErrorCategory::Numeric => 6,
        ErrorCategory::Network => 7,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose {
        log::LevelFilter::Debug
    } else if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, level),
        Command::TrainStage1(a) => commands::train_stage1(a, level),
        Command::TrainStage2(a) => commands::train_stage2(a, level),
        Command::Eval(a) => commands::eval(a, level),
        Command::Analyze(a) => commands::analyze(a, level),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.category()))
        }
    }
}
