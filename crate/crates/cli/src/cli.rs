use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "patchlab",
    version,
    about = "Activation-patching lab for a toy transformer with a planted format bug"
)]
pub struct Cli {
    /// More log output on stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy model on the planted-bug corpus.
    TrainToy(TrainToyArgs),
    /// Error rate per prompt format on held-out pairs.
    EvalFormats(EvalArgs),
    /// Run a prompt and save every activation.
    Trace(TraceArgs),
    /// Apply one intervention to one prompt and compare answers.
    Patch(PatchArgs),
    /// Transplant one layer at a time.
    SweepLayers(SweepLayersArgs),
    /// Transplant every head subset of a parity class.
    SweepHeads(SweepHeadsArgs),
    /// Partial transplants over a blend grid.
    SweepFraction(SweepFractionArgs),
    /// Pin neurons to a grid of values.
    SweepAlpha(SweepAlphaArgs),
    /// Repair (good into bug) and induction (bug into good).
    Bidirectional(BidirectionalArgs),
    /// Transplant on a list of pairs, reporting pairs without the bug as n/a.
    Generalize(GeneralizeArgs),
    /// Logit lens over depth for a saved trace.
    LogitLens(LensArgs),
    /// Direct logit attribution per layer for a saved trace.
    Attribution(LensArgs),
    /// Rank MLP neurons by bug-minus-good activation.
    DiffScore(DiffScoreArgs),
    /// Add a steering vector at selected neurons over an alpha grid.
    Steer(SteerArgs),
    /// Train a top-k sparse autoencoder on gathered activations.
    SaeTrain(SaeTrainArgs),
    /// Compare SAE features between bug and good prompts.
    SaeAnalyze(SaeAnalyzeArgs),
    /// Re-render CSV/SVG for every sweep JSON in a directory and summarize.
    Report(ReportArgs),
    /// Run the whole pipeline into an empty directory.
    ReproduceAll(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML config; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Training log (JSON); defaults to `<out>.log.json`.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Evaluate a seeded sample of this many pairs.
    #[arg(long)]
    pub max_pairs: Option<usize>,
    /// Include pairs where both label rules agree.
    #[arg(long)]
    pub all_pairs: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Raw prompt text.
    #[arg(long, conflicts_with_all = ["prompt_file", "pair"])]
    pub prompt: Option<String>,
    /// File holding the prompt text (trailing newline ignored).
    #[arg(long, value_name = "FILE", conflicts_with = "pair")]
    pub prompt_file: Option<PathBuf>,
    /// Operand pair, e.g. 9.8,9.11; rendered with --format.
    #[arg(long)]
    pub pair: Option<String>,
    #[arg(long, default_value = "qa")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Append the model's greedy answer before tracing.
    #[arg(long)]
    pub generate: bool,
    #[arg(long)]
    pub omit_head_outputs: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Intervention in TOML (see docs/FORMATS.md).
    #[arg(long, value_name = "FILE")]
    pub plan: PathBuf,
    #[arg(long)]
    pub pair: String,
    /// Target format.
    #[arg(long, default_value = "qa")]
    pub format: String,
    /// Result JSON.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// Shared by every sweep-like command.
#[derive(Debug, Args)]
pub struct SweepCommon {
    /// Sweep spec TOML; `protocol.kind` may be omitted.
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long, value_name = "FILE", required_unless_present = "mock")]
    pub checkpoint: Option<PathBuf>,
    /// Run against the planted-threshold mock subject instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub mock: bool,
    /// Mock definition (TOML); defaults to the built-in mock.
    #[arg(long, value_name = "FILE", requires = "mock")]
    pub mock_config: Option<PathBuf>,
    /// Task TOML supplying the pair pool.
    #[arg(long, value_name = "FILE")]
    pub task: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Format showing the bug (patch target).
    #[arg(long)]
    pub bug_format: Option<String>,
    /// Clean format (patch source).
    #[arg(long)]
    pub good_format: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepLayersArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    /// Comma list; default every layer.
    #[arg(long)]
    pub layers: Option<String>,
    /// pattern | attn_out | resid_post
    #[arg(long)]
    pub site: Option<String>,
    /// Pattern heads; default every head.
    #[arg(long)]
    pub heads: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepHeadsArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[arg(long)]
    pub layer: Option<usize>,
    /// even | odd | mixed
    #[arg(long)]
    pub parity: Option<String>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub max_subsets: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepFractionArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub heads: Option<String>,
    /// Comma list or start:stop:step.
    #[arg(long, allow_hyphen_values = true)]
    pub lambdas: Option<String>,
    /// convex | positions
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct NeuronArgs {
    /// Comma list like L5/N12,L6/N3; default the hijacker set.
    #[arg(long)]
    pub neurons: Option<String>,
    /// Layer range `a:b` searched for hijackers.
    #[arg(long)]
    pub hijacker_layers: Option<String>,
    #[arg(long)]
    pub hijacker_count: Option<usize>,
    /// Comma list or start:stop:step.
    #[arg(long, allow_hyphen_values = true)]
    pub alphas: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepAlphaArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[command(flatten)]
    pub neurons: NeuronArgs,
    /// Also run a same-size random neuron set from the same layers.
    #[arg(long)]
    pub random_control: bool,
}

#[derive(Debug, Args)]
pub struct BidirectionalArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub site: Option<String>,
}

#[derive(Debug, Args)]
pub struct GeneralizeArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub heads: Option<String>,
    /// Semicolon list like `9.8,9.11;3.9,3.45`; default the built-in five.
    #[arg(long)]
    pub pairs: Option<String>,
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[command(flatten)]
    pub neurons: NeuronArgs,
}

#[derive(Debug, Args)]
pub struct LensArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub trace: PathBuf,
    /// Default: the last position.
    #[arg(long)]
    pub position: Option<usize>,
    /// Tracked symbol; default the model's final top-1 at that position.
    #[arg(long)]
    pub token: Option<char>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiffScoreArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Trace of the bug run; with --good, scores that pair of traces only.
    #[arg(long, value_name = "FILE", requires = "good")]
    pub bad: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "bad")]
    pub good: Option<PathBuf>,
    /// Layer range `a:b`.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaeTrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Gather activations from this model...
    #[arg(long, value_name = "FILE", required_unless_present = "acts")]
    pub checkpoint: Option<PathBuf>,
    /// ...or train on a saved activation file.
    #[arg(long, value_name = "FILE", conflicts_with = "checkpoint")]
    pub acts: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub site: Option<String>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub expansion: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// SAE file to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also save the gathered activations.
    #[arg(long, value_name = "FILE")]
    pub save_acts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaeAnalyzeArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long, value_name = "FILE")]
    pub sae: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature for the head correlation; default the most bug-amplified.
    #[arg(long)]
    pub feature: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched (recursively) for sweep JSON files.
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Must be absent or empty.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}
