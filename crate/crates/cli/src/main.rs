//! `gf4d`: synthesize scenes, train dynamic Gaussian fields, render,
//! regenerate sequences and evaluate.

mod commands;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(gf4d::Error),
}

impl From<gf4d::Error> for CliError {
    fn from(e: gf4d::Error) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(gf4d::Error::UnknownConfigKey(_) | gf4d::Error::BadConfigValue { .. }) => 2,
            CliError::Lib(gf4d::Error::MissingInputs(_)) => 3,
            CliError::Lib(gf4d::Error::NumericalAbort { .. }) => 4,
            CliError::Lib(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "gf4d", version, about = "Dynamic Gaussian field pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a new workspace.
    Synth(SynthArgs),
    /// Run one or all training stages.
    Train(TrainArgs),
    /// Render one view at one timestep from a checkpoint.
    Render(RenderArgs),
    /// Regenerate every view with flow-guided token propagation.
    Regenerate(RegenerateArgs),
    /// Score a checkpoint against the workspace inputs.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Workspace directory to create.
    pub out: PathBuf,
    /// Scene spec file of key=value lines.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Spec override, repeatable: --set frames=8.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replace the contents of an existing workspace.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Static,
    Coarse,
    Refine,
    All,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Workspace directory created by `synth`.
    pub workspace: PathBuf,
    /// Training config file of key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable; wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Stage to run; `all` runs static, coarse, regeneration and refine.
    #[arg(long, value_enum, default_value = "all")]
    pub stage: StageArg,
    /// Stop after this many iterations in this invocation; rerun to resume.
    #[arg(long)]
    pub halt_after: Option<u64>,
    /// Iterations between resumable checkpoints.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Start over instead of resuming or skipping finished stages.
    #[arg(long)]
    pub fresh: bool,
    #[command(flatten)]
    pub regen: RegenOptions,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WindowArg {
    NoisyEnd,
    StepIndex,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LambdaArg {
    Linear,
    Printed,
}

#[derive(Args, Clone)]
pub struct RegenOptions {
    /// Sampler iterations that propagate keyframe features.
    #[arg(long, default_value_t = gf4d::tokenflow::DEFAULT_TAU)]
    pub tau: usize,
    /// Frames between keyframes.
    #[arg(long, default_value_t = gf4d::tokenflow::KEYFRAME_INTERVAL)]
    pub interval: usize,
    /// Sampler iterations in total.
    #[arg(long, default_value_t = gf4d::tokenflow::TOTAL_STEPS)]
    pub steps: usize,
    /// Toy denoiser contraction rate.
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    /// Feature channels per cell.
    #[arg(long, default_value_t = gf4d::tokenflow::DEFAULT_CHANNELS)]
    pub channels: usize,
    /// Whether `--tau` counts from the noisy end or by step index.
    #[arg(long, value_enum, default_value = "noisy-end")]
    pub window: WindowArg,
    /// Direction of the keyframe blend weight.
    #[arg(long, value_enum, default_value = "linear")]
    pub lambda: LambdaArg,
    /// Start all frames of a view from the same noise.
    #[arg(long)]
    pub shared_noise: bool,
    /// Seed of the initial feature noise.
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
}

#[derive(Args)]
pub struct RenderArgs {
    /// Workspace directory created by `synth`.
    pub workspace: PathBuf,
    /// Defaults to the latest finished stage checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// 1-based viewpoint index.
    #[arg(long)]
    pub view: usize,
    /// 1-based timestep.
    #[arg(long)]
    pub time: usize,
    /// Also write the flow from --time to this timestep.
    #[arg(long)]
    pub flow_to: Option<usize>,
    /// Output directory; defaults to <workspace>/renders.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RegenerateArgs {
    /// Workspace directory created by `synth`.
    pub workspace: PathBuf,
    /// Defaults to <workspace>/checkpoints/coarse.gf4d.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub regen: RegenOptions,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Workspace directory created by `synth`.
    pub workspace: PathBuf,
    /// Defaults to the latest finished stage checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report path; defaults to <workspace>/logs/eval.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("GF4D_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("GF4D_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Regenerate(a) => commands::regenerate(&a),
        Command::Eval(a) => commands::eval(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
