//! Command-line front end. Every table written by a command starts with a
//! `# config <fingerprint>` line followed by a header row.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{load_dataset, Dataset};

use crate::error::{Error, Result};
use crate::text::SignalPolicy;

#[derive(Debug, Parser)]
#[command(
    name = "gateformer",
    version,
    about = "User-conditioned keyword gating in front of a transformer news recommender",
    after_help = "Any config key can be overridden as `--section.key value`, e.g. `--gate.method first`."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus in MIND format.
    Synth(SynthArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Score the dev impressions with a checkpoint.
    Eval(CheckpointArgs),
    /// Time and cost user encoding across gate sizes.
    Bench(BenchArgs),
    /// Sparse, dense and hybrid recall with a checkpoint.
    Recall(RecallArgs),
    /// Keyword position histogram and per-user keyword dumps.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = SignalPolicy::Random)]
    pub policy: SignalPolicy,
    #[arg(long, default_value_t = 400)]
    pub users: usize,
    #[arg(long, default_value_t = 800)]
    pub items: usize,
    #[arg(long, default_value_t = 8)]
    pub topics: usize,
    #[arg(long, default_value_t = 30)]
    pub tokens_per_item: usize,
    #[arg(long, default_value_t = 1)]
    pub signal_tokens: usize,
    #[arg(long, default_value_t = 0.25)]
    pub dev_fraction: f64,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data directory; overrides `data.dir` and `$GATEFORMER_DATA_DIR`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluation worker cap.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// A checkpoint directory, or a training output directory holding one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated gate sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10")]
    pub k: Vec<usize>,
    /// Directory with one training output per size, named `k<K>`; without
    /// it each size is trained in place.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Timed user encodings per size (at least 30).
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RecallArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,50,100")]
    pub k: Vec<usize>,
    /// Sparse pool re-ranked by the hybrid retriever.
    #[arg(long, default_value_t = 200)]
    pub n_sparse: usize,
    /// Relevance by the `R` nearest documents in embedding space instead of
    /// clicks.
    #[arg(long)]
    pub dense_relevance: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    /// Users included in the keyword dump.
    #[arg(long, default_value_t = 20)]
    pub dump_users: usize,
}

/// Dotted `section.key` config overrides with their raw values.
pub type Overrides = Vec<(String, String)>;

/// Pulls `--section.key value` and `--section.key=value` pairs out of
/// `args`, returning the remaining arguments and the overrides.
pub fn split_overrides<I: IntoIterator<Item = String>>(args: I) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (body, None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("override `--{key}` needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> Result<()> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match cli.command {
        Command::Synth(a) => {
            if !overrides.is_empty() {
                return Err(Error::Config("synth takes no config overrides".into()));
            }
            commands::synth(&a)
        }
        Command::Train(a) => commands::train(&a, &overrides),
        Command::Eval(a) => commands::eval(&a, &overrides),
        Command::Bench(a) => commands::bench(&a, &overrides),
        Command::Recall(a) => commands::recall(&a, &overrides),
        Command::Analyze(a) => commands::analyze(&a, &overrides),
    }
}
