//! `shaper`: corpus preparation, supernet training, shape search, predictor
//! fitting, latency benchmarking and shape analysis.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shaper::error::ErrorCategory;

#[derive(Parser)]
#[command(name = "shaper", version, about = "Elastic-width Transformer supernets")]
struct Cli {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic text corpus.
    SynthCorpus(SynthCorpusArgs),
    /// Build a frequency-ranked vocabulary file from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Sandwich-rule MLM pre-training of the supernet.
    Train(TrainArgs),
    /// Held-out perplexity of one shape, or a dataset of random shapes.
    EvalPerplexity(EvalArgs),
    /// Evolutionary search for the best shape under a constraint.
    Search(SearchArgs),
    /// Fit a gradient-boosted perplexity or latency predictor.
    FitPredictor(FitArgs),
    /// Measure forward latency of random shapes on this host.
    Bench(BenchArgs),
    /// Cigar-shape scaling of a reference shape to a parameter target.
    Heuristic(HeuristicArgs),
    /// A named templated shape.
    Template(TemplateArgs),
    /// Softmax of the bottleneck diagonals of a checkpoint, as CSV.
    AnalyzeDiagonals(DiagArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct SynthCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bytes: Option<usize>,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated dims of a single shape.
    #[arg(long, conflicts_with = "samples")]
    shape: Option<String>,
    /// Number of random shapes for a perplexity dataset.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    max_sequences: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Perplexity predictor JSON used as fitness.
    #[arg(long, conflicts_with = "direct")]
    predictor: Option<PathBuf>,
    /// Evaluate perplexity directly on the checkpoint instead.
    #[arg(long)]
    direct: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    min_params: Option<u64>,
    #[arg(long)]
    max_params: Option<u64>,
    #[arg(long, conflicts_with_all = ["min_params", "max_params"])]
    latency_max_ms: Option<f64>,
    #[arg(long)]
    latency_predictor: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = ["perplexity", "latency"])]
    kind: String,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    device: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct HeuristicArgs {
    /// Comma-separated dims of the reference shape.
    #[arg(long)]
    reference: String,
    #[arg(long)]
    target_params: u64,
    /// Use the BERT-base backbone instead of the configured one.
    #[arg(long)]
    bert_base: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TemplateArgs {
    #[arg(long)]
    kind: String,
    #[arg(long)]
    bert_base: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DiagArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn exit_code(e: &shaper::Error) -> u8 {
    match e.category() {
        ErrorCategory::Usage => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Numeric => 3,
        ErrorCategory::Infeasible => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
