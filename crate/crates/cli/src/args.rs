use std::path::PathBuf;

use cape_core::mechanism::{NonSensitivePolicy, Selection};
use cape_core::providers::ContextMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cape", version, about = "Token-level prompt perturbation with local differential privacy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Precompute distances and calibrate the logit clip bound.
    Setup(SetupArgs),
    /// Perturb a corpus of prompts.
    Perturb(PerturbArgs),
    /// Run an inversion attack against a perturbation artifact.
    Attack(AttackArgs),
    /// Compute utility or privacy metrics for an artifact.
    Evaluate(EvaluateArgs),
    /// Exhaustively check the privacy ratio bound on small fixtures.
    DpCheck(DpCheckArgs),
    /// Probe a model server and verify it serves the loaded vocabulary.
    ServeCheck(ServeCheckArgs),
}

/// Inputs shared by every command that touches a vocabulary.
#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON config file, or a run manifest to replay.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Embedding table (text or binary). Defaults to the provider's table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Fixture directory or http(s) URL of a model server.
    /// Falls back to CAPE_PROVIDER_URL.
    #[arg(long)]
    pub provider: Option<String>,
    /// Non-sensitive token list, or `none`. Defaults to the shipped list.
    #[arg(long)]
    pub nonsensitive: Option<String>,
    /// Distance matrix written by `cape setup --precompute`.
    #[arg(long)]
    pub distances: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Worker threads; 1 runs everything on the main thread.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct MechanismArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub lambda_l: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    /// Number of equal-width utility buckets.
    #[arg(long)]
    pub buckets: Option<usize>,
    /// Omit to draw a random seed; it is recorded in the manifest.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub selection: Option<SelectionArg>,
    /// Fixed logit clip bound. Without it the bound is calibrated.
    #[arg(long)]
    pub clip_bound: Option<f64>,
    /// Sensitive contexts used to calibrate the clip bound.
    #[arg(long)]
    pub calibration_samples: Option<usize>,
    #[arg(long, value_enum)]
    pub nonsensitive_policy: Option<PolicyArg>,
}

#[derive(Debug, Args)]
pub struct SetupArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory for the cache and the generated config.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Compute and store the full distance matrix.
    #[arg(long)]
    pub precompute: bool,
    /// Prompts whose first sensitive contexts calibrate the clip bound.
    #[arg(long)]
    pub calibrate_from: Option<PathBuf>,
    #[arg(long)]
    pub calibration_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub mechanism: MechanismArgs,
    /// Text prompts (one per line) or JSON lines with `text` or `token_ids`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Record failed prompts and continue instead of aborting.
    #[arg(long)]
    pub skip_errors: bool,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long, value_enum, default_value_t = AttackArg::Knn)]
    pub attack: AttackArg,
    /// Neighbors counted as a hit in the KNN attack.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Defaults to `<artifact>.<attack>.json`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write per-position outcomes as CSV.
    #[arg(long)]
    pub positions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Mechanism runs per token for the mapping metric.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Prompt whose context is used for the cdf metric (default: first).
    #[arg(long)]
    pub prompt_id: Option<u64>,
    /// Position for the cdf metric (default: first perturbed position).
    #[arg(long)]
    pub position: Option<usize>,
    /// Top-k sizes for the long-tail ratios.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 100])]
    pub top_k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct DpCheckArgs {
    #[arg(long, default_value_t = 50)]
    pub vocab_size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [2.0])]
    pub epsilon: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [50usize])]
    pub buckets: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FixtureArg::Random])]
    pub fixtures: Vec<FixtureArg>,
    /// Also check the plain exponential mechanism.
    #[arg(long)]
    pub standard: bool,
    #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
    pub scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write every report as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeCheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also tokenize this text and fetch logits for its first token.
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Bidirectional,
    Causal,
}

impl From<ModeArg> for ContextMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bidirectional => ContextMode::Bidirectional,
            ModeArg::Causal => ContextMode::Causal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Bucketized,
    Standard,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::Bucketized => Selection::Bucketized,
            SelectionArg::Standard => Selection::Standard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Skip,
    PerturbAll,
}

impl From<PolicyArg> for NonSensitivePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Skip => NonSensitivePolicy::Skip,
            PolicyArg::PerturbAll => NonSensitivePolicy::PerturbAll,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackArg {
    Knn,
    Mti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Rouge,
    Mapping,
    Cdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureArg {
    Random,
    Identical,
    SkewedWithin,
    SkewedAcross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Global,
    PerOrigin,
}
