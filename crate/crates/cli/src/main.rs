use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use repaug::augment::Method;
use repaug::loss::LossKind;
use repaug::Error;

mod commands;

/// Representation-level augmentation experiments for query/item retrieval.
#[derive(Parser)]
#[command(name = "repaug", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic query/code corpus.
    Synth(SynthArgs),
    /// Train a bi-encoder, with or without augmentation.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Check the mutual-information lower bounds on correlated Gaussians.
    VerifyBounds(BoundArgs),
    /// Apply one augmentation to a matrix of representations.
    InspectAug(InspectArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    /// Probability that a query token is replaced by a random word.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train the control arm without augmentation.
    #[arg(long)]
    pub no_aug: bool,
    #[arg(long)]
    pub aug_copies: Option<usize>,
    /// Comma-separated augmentation menu, e.g. `mixed,perturb`.
    #[arg(long, value_delimiter = ',')]
    pub aug_methods: Option<Vec<Method>>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub normalize_output: bool,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: repaug::Split,
    /// Also report MRR truncated at rank K.
    #[arg(long)]
    pub k: Option<usize>,
    /// JSON report path; KDE and PCA CSV files are written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write item embeddings as an embedding cache.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args)]
pub struct BoundArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.9, allow_negative_numbers = true)]
    pub rho: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub copies: usize,
    #[arg(long, default_value_t = 0.95)]
    pub lambda: f64,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    /// Held-out batches averaged into each reported loss.
    #[arg(long, default_value_t = 50)]
    pub eval_batches: usize,
    /// Allowed excess of a bound over the true mutual information, in nats.
    #[arg(long, default_value_t = 0.1)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Subtracted from every measured loss; exercises the violation path.
    #[arg(long, default_value_t = 0.0, hide = true, allow_negative_numbers = true)]
    pub loss_shift: f64,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub method: Method,
    /// Comma-separated overrides: lambda, lambda_low, lambda_high, p, p_b, sigma.
    #[arg(long, default_value = "")]
    pub params: String,
    /// JSON matrix (array of rows) or `.raec` embedding cache.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<repaug::Split, String> {
    match s {
        "train" => Ok(repaug::Split::Train),
        "valid" => Ok(repaug::Split::Valid),
        "test" => Ok(repaug::Split::Test),
        other => Err(format!("unknown split `{other}` (valid: train, valid, test)")),
    }
}

pub enum Failure {
    /// A checked property did not hold.
    Violation(String),
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Violation(_) => 1,
            Failure::Usage(_) | Failure::Lib(Error::Config(_)) => 2,
            Failure::Lib(Error::Io { .. } | Error::Parse { .. } | Error::Schema(_) | Error::Format(_)) => 3,
            Failure::Lib(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::VerifyBounds(a) => commands::verify_bounds(a),
        Command::InspectAug(a) => commands::inspect_aug(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Violation(msg) => eprintln!("violation: {msg}"),
                Failure::Usage(msg) => eprintln!("usage error: {msg}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
