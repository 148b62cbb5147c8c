//! `posekit`: synthesize depth datasets, train the three-stage pose model,
//! run inference and evaluate PDJ curves.

mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "posekit", version, about = "Depth-image human pose estimation")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "POSEKIT_THREADS")]
    threads: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a dataset of rendered depth images and annotations.
    Gen(GenArgs),
    /// Train the heat-map network, the matcher and the structural weights.
    Train(TrainArgs),
    /// Predict poses for depth images and write one JSON file per image.
    Infer(InferArgs),
    /// Compute PDJ curves against the annotations of a dataset split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Distinct subjects [default: min(10, count)].
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Subjects held out for the test split [default: min(2, subjects - 1)].
    #[arg(long)]
    pub test_subjects: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub width: u32,
    #[arg(long, default_value_t = 128)]
    pub height: u32,
    /// Lateral extent of one pixel at the subject, millimetres.
    #[arg(long, default_value_t = 16.0)]
    pub mm_per_pixel: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    All,
    Fcn,
    Matcher,
    Struct,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory; training resumes from it when it already holds a model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    pub stage: StageArg,
    /// Alternation rounds over the selected stages.
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    /// Relative change of the mean best score that ends training early.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Body parts K; must match the dataset.
    #[arg(long, default_value_t = 19)]
    pub parts: usize,
    /// Kinematic tree JSON; required when K is not 19.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// Proposal window side in heat-map cells (n = window² = 289 proposals per part).
    #[arg(long, default_value_t = 17)]
    pub window: usize,
    /// Templates per part (T).
    #[arg(long, default_value_t = 10)]
    pub templates: usize,
    /// Structural SVM regularisation constant C.
    #[arg(long = "svm-c", default_value_t = 0.001)]
    pub c: f64,
    /// Loss threshold τ as a fraction of the torso diameter.
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    #[arg(long, default_value_t = 10)]
    pub fcn_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub fcn_lr: f64,
    /// Target Gaussian std, heat-map pixels.
    #[arg(long, default_value_t = 2.0)]
    pub fcn_sigma: f64,
    #[arg(long, default_value_t = 5)]
    pub matcher_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub matcher_lr: f64,
    /// CCCP outer iterations per round.
    #[arg(long, default_value_t = 10)]
    pub outer_iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// `.kdep` images or dataset directories.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Split to run when an input is a dataset directory.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `<name>.svg` with joints in red and bones in white.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Model to evaluate.
    #[arg(long, required_unless_present = "predictions")]
    pub model: Option<PathBuf>,
    /// Directory of `<name>.json` pose files to score instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Also compare heat-map argmax, matcher reranking and the full model.
    #[arg(long, requires = "model")]
    pub components: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] posekit::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(posekit::Error::Config(_)) => 2,
            CliError::Run(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a).map_err(|e| match e {
            CliError::Run(err) => CliError::Usage(err.to_string()),
            other => other,
        }),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
