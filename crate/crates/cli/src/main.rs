//! `hiersplat`: taxonomy construction, SLAM runs, evaluation and plots.

mod error;
mod eval_cmd;
mod plot;
mod slam_cmd;
mod synth;
mod tree;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "hiersplat", version, about = "Hierarchical semantic Gaussian splatting SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Semantic hierarchy construction.
    #[command(subcommand)]
    Tree(TreeCommand),
    /// Tracking and mapping.
    #[command(subcommand)]
    Slam(SlamCommand),
    /// Recompute the metrics of a finished run from its artifacts.
    Eval(EvalArgs),
    /// Write label maps, render comparisons, trajectory and loss plots.
    Plot(PlotArgs),
    /// Generate the synthetic toy-room dataset.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
enum TreeCommand {
    /// Build a tree from a class list with a language model and shape codes.
    Build(TreeBuildArgs),
}

#[derive(Args, Debug)]
pub struct TreeBuildArgs {
    /// Class list, one `id name` pair per line.
    #[arg(long, value_name = "FILE")]
    pub classes: PathBuf,
    /// Builder and HTTP client settings (JSON).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Chat completions endpoint; the key is read from HIERSPLAT_LLM_KEY.
    #[arg(long, value_name = "URL", conflicts_with = "mock")]
    pub llm_endpoint: Option<String>,
    /// Replay a recorded transcript instead of calling a model.
    #[arg(long, value_name = "TRANSCRIPT")]
    pub mock: Option<PathBuf>,
    /// Save every prompt and reply to this transcript file.
    #[arg(long, value_name = "FILE")]
    pub record: Option<PathBuf>,
    /// Per-face shape codes, rows of `class_id,face_index,e0,e1`.
    #[arg(long, value_name = "FILE", conflicts_with = "synthetic_shapes")]
    pub shape_embeddings: Option<PathBuf>,
    /// Derive stand-in shape codes from the class names.
    #[arg(long)]
    pub synthetic_shapes: bool,
    /// Output tree JSON.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Print the tree and ask before writing it.
    #[arg(long)]
    pub review: bool,
    /// Seed for clustering and synthetic shapes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
enum SlamCommand {
    /// Run the full pipeline over a dataset.
    Run(SlamRunArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Rgbd,
    Mono,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutArg {
    Flat,
    Onehot,
    Binary,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetArg {
    Default,
    Quality,
}

#[derive(Args, Debug)]
pub struct SlamRunArgs {
    /// Dataset directory with a manifest.json.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "rgbd")]
    pub mode: ModeArg,
    /// Semantic tree; defaults to the dataset's own tree.
    #[arg(long, value_name = "FILE")]
    pub tree: Option<PathBuf>,
    /// Semantic code layout; requires a tree.
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
    /// SLAM configuration (JSON); replaces the preset.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Built-in settings used when no --config is given.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: PresetArg,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Process only the first N frames.
    #[arg(long, value_name = "N")]
    pub frames: Option<usize>,
    /// Mono only: derive depth priors from the dataset depth with random
    /// per-set affine distortions.
    #[arg(long)]
    pub synthetic_prior: bool,
    /// Relative Gaussian noise on synthetic priors.
    #[arg(long, default_value_t = 0.0)]
    pub prior_noise: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `slam run`.
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Dataset with the ground truth; defaults to the one recorded in the run.
    #[arg(long, value_name = "DIR")]
    pub gt: Option<PathBuf>,
    /// Also write the metrics here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub gt: Option<PathBuf>,
    /// Tree level for the label maps; all levels when omitted.
    #[arg(long, value_name = "N")]
    pub level: Option<usize>,
    /// Frame to render.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Tree(TreeCommand::Build(a)) => tree::build(&a),
        Command::Slam(SlamCommand::Run(a)) => slam_cmd::run(&a),
        Command::Eval(a) => eval_cmd::run(&a),
        Command::Plot(a) => plot::run(&a),
        Command::Synth(a) => synth::run(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
