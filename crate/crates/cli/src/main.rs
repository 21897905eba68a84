mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "simclf", version, about = "Contrastive binary function embeddings: train, evaluate, search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a corpus, write its vocabulary and statistics.
    Ingest(IngestArgs),
    /// Train an encoder and write a checkpoint plus per-epoch report.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus: AUC, MRR, Recall@1, alignment, uniformity.
    Eval(EvalArgs),
    /// Train on nested subsets of positive pairs and score each.
    Fewshot(FewshotArgs),
    /// Train once per temperature and score each.
    Sweep(SweepArgs),
    /// Nearest-neighbour and vulnerability search over embeddings.
    Search(SearchArgs),
    /// Token frequency, rank-2 projection and similarity histogram data.
    Analyze(AnalyzeArgs),
    /// Write the synthetic fixture corpus or planted-cluster embeddings.
    Fixture(FixtureArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed; falls back to the config file, then SIMCLF_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat key = value file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print phase timings to stderr.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    /// JSONL corpus, one function instance per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file (one token per line).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Fail on the first malformed line instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub use_attention: Option<bool>,
    #[arg(long)]
    pub use_head: Option<bool>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Draw positives as two fresh augmentations of one variant, e.g.
    /// "register-rename:1,nop-insertion:0.2".
    #[arg(long)]
    pub augment: Option<String>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path; defaults to <out>/checkpoint.sclf.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate pool sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pool_size: Option<Vec<usize>>,
    /// Similarity histogram bucket width.
    #[arg(long, default_value_t = 0.1)]
    pub bucket_width: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Held-out corpus; without it the last `--holdout` fraction of groups is held out.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FewshotArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Pair counts, comma separated; 0 scores the untrained encoder.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub temperatures: Option<Vec<f64>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Corpus to encode (with --checkpoint).
    #[arg(long, requires = "checkpoint")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
    #[arg(long, requires = "corpus")]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed embeddings as JSONL {"id", "embedding"} instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub embeddings: Option<PathBuf>,
    /// Query instance ids, repeatable or comma separated.
    #[arg(long, value_delimiter = ',')]
    pub query: Vec<String>,
    /// JSON list of {"name", "ids"} groups for vulnerability search.
    #[arg(long)]
    pub vuln: Option<PathBuf>,
    /// Results per query; for --vuln defaults to each group's size.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the binary index here.
    #[arg(long)]
    pub save_index: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Adds the rank-2 projection and similarity histogram.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub bucket_width: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub groups: usize,
    #[arg(long, default_value_t = 4)]
    pub variants: usize,
    /// Transform spec for variants; defaults to the built-in mix.
    #[arg(long)]
    pub transforms: Option<String>,
    /// Instead of a corpus, write unit embeddings with clusters of these sizes.
    #[arg(long, value_delimiter = ',')]
    pub planted: Option<Vec<usize>>,
    #[arg(long, default_value_t = 2220)]
    pub total: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Fewshot(a) => commands::fewshot(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Search(a) => commands::search(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Fixture(a) => commands::fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
