//! Command-line interface.
//!
//! Option precedence is flag (or `VCR_SEED` for the seed), then the JSON
//! file given by `--config`, then the documented default. The resolved
//! values are echoed into every report.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::FileConfig;

const CRITERIA: [&str; 4] = ["max-margin", "min-margin", "min-entropy", "random"];
const WEIGHTINGS: [&str; 3] = ["scale", "uniform", "global"];

#[derive(Debug, Parser)]
#[command(name = "vcr", version, about = "Multi-scale visual content refinement for low-shot classification")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the decomposing scale set
    Scales(ScalesArgs),
    /// Write the crop manifest an offline encoder must embed
    Decompose(DecomposeArgs),
    /// Turn a crop store into a store of refined features
    Refine(RefineArgs),
    /// Zero-shot accuracy of refined (or global) features
    Zeroshot(ZeroshotArgs),
    /// Few-shot evaluation with a cache adapter
    Fewshot(EvalArgs),
    /// Cache built on a source dataset, evaluated on shifted targets
    Domain(DomainArgs),
    /// Run the ablation modes on one episode
    Ablate(EvalArgs),
    /// Planted-scene benchmark on generated worlds
    Synth(SynthArgs),
    /// Check a .vcre file and its sidecar manifest
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON file with default values for any option (same names, snake_case)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScalesArgs {
    /// Number of scales [default: 10]
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Number of scales [default: 10]
    #[arg(long)]
    n: Option<usize>,
    /// Views per local scale [default: 100]
    #[arg(long)]
    m: Option<usize>,
    /// View selection criterion [default: max-margin]
    #[arg(long, value_parser = CRITERIA)]
    criterion: Option<String>,
    /// Feature merge weighting [default: scale]
    #[arg(long, value_parser = WEIGHTINGS)]
    weighting: Option<String>,
    /// Seed for every random choice [default: 0]
    #[arg(long, env = "VCR_SEED")]
    seed: Option<u64>,
    /// Worker threads; never changes results [default: 1]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Embedding store (.vcre with .json sidecar)
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    /// Text classifier store (.vcre with .json sidecar)
    #[arg(long, value_name = "PATH")]
    classifier: Option<PathBuf>,
    /// Dataset manifest: {"classes": [...], "images": [{"id", "label", "width", "height"}]}
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Output file; stdout when absent
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Report format [default: json, or csv when --out ends in .csv]
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Record mean wall time per image (reports stop being reproducible)
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct AdapterArgs {
    /// Training images per class [default: 16; 0 for ablate]
    #[arg(long)]
    shots: Option<usize>,
    /// Validation images per class for the grid search [default: 0, reuse train]
    #[arg(long)]
    val_per_class: Option<usize>,
    /// Cache mixing weight [default: 1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Cache sharpness [default: 5]
    #[arg(long)]
    beta: Option<f64>,
    /// Search alpha in [0.1, 5] and beta in [1, 10] on validation data
    #[arg(long)]
    grid: bool,
    /// Points per grid axis [default: 20]
    #[arg(long)]
    grid_steps: Option<usize>,
    /// Gradient steps on the cache keys; 0 keeps the cache training-free [default: 0]
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate for cache training [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,
    /// Refine training images too before building the cache
    #[arg(long)]
    refine_cache_keys: bool,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    /// Dataset manifest listing the images
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Number of scales [default: 10]
    #[arg(long)]
    n: Option<usize>,
    /// Views per local scale [default: 100]
    #[arg(long)]
    m: Option<usize>,
    /// Seed for crop sampling [default: 0]
    #[arg(long, env = "VCR_SEED")]
    seed: Option<u64>,
    /// Also list the ten-crop views (corners, center and their mirrors)
    #[arg(long)]
    ten_crop: bool,
    /// Output crop manifest (JSON); stdout when absent
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct RefineArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Output refined store (.vcre; the sidecar is written next to it)
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct ZeroshotArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    adapter: AdapterArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Comma-separated modes, e.g. global_baseline,ten_crop,per_scale:0.5,n:5,max_margin,vcr
    /// [default: global_baseline,vcr for fewshot; the component, per-scale, multi-crop and criterion modes for ablate]
    #[arg(long)]
    modes: Option<String>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct DomainArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Target dataset as MANIFEST=EMBEDDINGS (repeatable)
    #[arg(long, value_name = "MANIFEST=EMBEDDINGS")]
    target: Vec<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Benchmark preset: default, tiny or clean [default: default]
    #[arg(long)]
    preset: Option<String>,
    /// Override the preset's number of scales
    #[arg(long)]
    n: Option<usize>,
    /// Override the preset's views per local scale
    #[arg(long)]
    m: Option<usize>,
    /// Override the preset's shots per class (0 = zero-shot)
    #[arg(long)]
    shots: Option<usize>,
    /// Override the preset's noise amplitude
    #[arg(long)]
    noise: Option<f64>,
    /// Override the preset's number of generated worlds
    #[arg(long)]
    worlds: Option<usize>,
    /// Seed for every random choice [default: 0]
    #[arg(long, env = "VCR_SEED")]
    seed: Option<u64>,
    /// Worker threads; never changes results [default: 1]
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated modes [default: the component and criterion modes]
    #[arg(long)]
    modes: Option<String>,
    #[command(flatten)]
    output: OutputArgs,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Store to check
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// Also check the dimension against this classifier
    #[arg(long, value_name = "PATH")]
    classifier: Option<PathBuf>,
    /// Also check that every image of this dataset manifest is present
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub(crate) enum Failure {
    /// Bad invocation: exit 2.
    Usage(String),
    /// The operation itself failed: exit 1.
    Domain(String),
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version come through here with code 0
            let code = e.exit_code();
            let sink: &mut dyn Write = if code == 0 { stdout } else { stderr };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match commands::dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Domain(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
    }
}
