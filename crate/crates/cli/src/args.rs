use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ellsig_core::cost::Convention;
use ellsig_core::synth::NormKind;
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "ellsig", version, about = "Ellipse signatures: synthesize, extract, fit and verify")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Global {
    /// Seed for every random draw in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for dense linear algebra.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Draw a random final layer and save it.
    Synth(SynthArgs),
    /// Sample logprob outputs from a saved model.
    Sample(SampleArgs),
    /// Recover ellipse parameters from a logprob matrix.
    Fit(FitArgs),
    /// Check logprobs against one model's ellipse.
    Verify(VerifyArgs),
    /// Attribute logprobs to the closest of several candidate models.
    Identify(IdentifyArgs),
    /// Run the mock completions API until interrupted.
    Serve(ServeArgs),
    /// Harvest a logprob matrix from a running completions API.
    Attack(AttackArgs),
    /// Sample counts and query/token projections for an extraction.
    Cost(CostArgs),
    /// Time ellipsoid fits across widths and extrapolate.
    Bench(BenchArgs),
    /// Histogram of normalized hidden-state magnitudes.
    Hist(HistArgs),
    /// Generate a random ellipse MAC key.
    MacKeygen(MacKeygenArgs),
    /// Sign a message with an ellipse MAC key.
    MacSign(MacSignArgs),
    /// Verify a signed message, optionally recording it against replays.
    MacVerify(MacVerifyArgs),
}

pub fn parse_norm(s: &str) -> Result<NormKind, String> {
    s.parse::<NormKind>().map_err(|e| e.to_string())
}

pub fn parse_convention(s: &str) -> Result<Convention, String> {
    s.parse::<Convention>().map_err(|e| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub v: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value = "scaled_rms", value_parser = parse_norm)]
    pub norm: NormKind,
    #[arg(long, default_value_t = 0.0)]
    pub eps: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, default_value = "scaled_rms", value_parser = parse_norm)]
    pub norm: NormKind,
    /// Hidden width; estimated from the samples when omitted.
    #[arg(long)]
    pub d: Option<usize>,
    /// Ground-truth model; when given, recovery scores are written as CSV.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Exact model to verify against.
    #[arg(long, conflicts_with = "recovered", required_unless_present = "recovered")]
    pub model_file: Option<PathBuf>,
    /// Recovered parameters (output of `fit`) to verify against.
    #[arg(long)]
    pub recovered: Option<PathBuf>,
    /// Acceptance threshold on ellipse distance; model-dependent default.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Candidate model files.
    #[arg(long = "candidate", required = true, num_args = 1..)]
    pub candidates: Vec<PathBuf>,
    /// Project each column into every candidate's output space first.
    #[arg(long)]
    pub project: bool,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// Model to serve; alternatively a MAC key file via --key.
    #[arg(long, conflicts_with = "key", required_unless_present = "key")]
    pub model_file: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub top_k: usize,
    #[arg(long, default_value_t = 300)]
    pub max_bias_tokens: usize,
    #[arg(long = "price-per-1k", default_value_t = 0.0)]
    pub price_per_1k: f64,
    #[arg(long)]
    pub qps: Option<f64>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    /// Base URL of the completions API.
    #[arg(long)]
    pub url: String,
    /// Vocabulary size of the served model.
    #[arg(long)]
    pub v: usize,
    #[arg(long, default_value_t = 8)]
    pub top_k: usize,
    /// Total logprob vectors to harvest.
    #[arg(long)]
    pub n: usize,
    /// Hidden width if known; discovered otherwise.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, default_value_t = ellsig_provider::DEFAULT_BOOST)]
    pub boost: f64,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    #[arg(long = "price-per-1k", default_value_t = 0.0)]
    pub price_per_1k: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CostArgs {
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub d: Vec<u64>,
    #[arg(long, default_value = "table1", value_parser = parse_convention)]
    pub convention: Convention,
    /// Vocabulary size; enables query and token projections.
    #[arg(long)]
    pub v: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub top_k: u64,
    #[arg(long = "price-per-1k", default_value_t = 0.0)]
    pub price_per_1k: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
    pub dims: Vec<usize>,
    /// Points per fit as a multiple of the unknown count.
    #[arg(long, default_value_t = 1.1)]
    pub oversample: f64,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, value_delimiter = ',', default_value = "1536,4096,8192")]
    pub extrapolate: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct HistArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long, default_value_t = 10000)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MacKeygenArgs {
    #[arg(long)]
    pub v: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MacSignArgs {
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long, conflicts_with = "message_file", required_unless_present = "message_file")]
    pub message: Option<String>,
    #[arg(long)]
    pub message_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub sequence_index: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MacVerifyArgs {
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long)]
    pub signed: PathBuf,
    /// Append-only digest file for replay detection.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Record the digest so later presentations are flagged as replays.
    #[arg(long)]
    pub record: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
