//! `blend`: dataset generation, two-stage training, evaluation, analysis and
//! report tables.

mod commands;
mod config;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use blend_core::data::{GeneratorKind, MaskMode};
use blend_core::losses::{SoftmaxAxis, Strategy};
use blend_core::models::{Arch, RecLoss};
use blend_core::{BlendError, Execution};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "blend", version, about = "Behavior-guided distillation experiments")]
struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker mode for data-parallel loops.
    #[arg(long, global = true, value_enum)]
    execution: Option<ExecArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Sequential => Execution::Sequential,
            ExecArg::Parallel => Execution::Parallel,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a teacher that sees spikes and behavior.
    TrainTeacher(TrainArgs),
    /// Train a spikes-only student without a teacher.
    TrainBaseline(TrainArgs),
    /// Train a spikes-only student against a teacher checkpoint.
    Distill(DistillArgs),
    /// Score a checkpoint: co-bps, Vel-R² and PSTH-R².
    Eval(EvalArgs),
    /// Lead/lag, behavior-state and coupling analyses.
    Analyze(AnalyzeArgs),
    /// Aggregate eval reports into a strategy × dataset table.
    Table(TableArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse::<GeneratorKind>)]
    pub dataset: Option<GeneratorKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub timepoints: Option<usize>,
    #[arg(long)]
    pub neurons: Option<usize>,
    #[arg(long)]
    pub conditions: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoint, history and resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse::<Arch>)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub factors: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long, value_parser = parse::<MaskMode>)]
    pub mask_mode: Option<MaskMode>,
    #[arg(long, value_parser = parse::<RecLoss>)]
    pub rec_loss: Option<RecLoss>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long, value_parser = parse::<Strategy>)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse::<SoftmaxAxis>)]
    pub softmax_axis: Option<SoftmaxAxis>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fixed ridge penalty instead of grid selection.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Write decoded-vs-true behavior for every eval trial to this CSV.
    #[arg(long)]
    pub dump_trajectories: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint for the coupling-vs-error analysis.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub behavior_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub max_lag: usize,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    /// Eval report files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Directory for table.csv, table.txt and table.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr<Err = BlendError>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: BlendError| match e {
        BlendError::InvalidArgument(m) => m,
        other => other.to_string(),
    })
}

fn exit_code(e: &BlendError) -> u8 {
    match e {
        BlendError::InvalidArgument(_) | BlendError::Json(_) => 2,
        BlendError::Io { .. }
        | BlendError::Format { .. }
        | BlendError::Checksum { .. }
        | BlendError::Truncated { .. }
        | BlendError::ManifestMismatch { .. }
        | BlendError::Version { .. } => 3,
        BlendError::Compatibility { .. } | BlendError::Shape(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let loaded = match config::load(cli.config.as_deref()) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let ctx = commands::Context {
        loaded,
        execution: cli.execution.map(Execution::from),
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::TrainTeacher(a) => commands::train(&ctx, commands::Stage::Teacher, a, None),
        Command::TrainBaseline(a) => commands::train(&ctx, commands::Stage::Baseline, a, None),
        Command::Distill(a) => {
            let DistillArgs {
                train,
                teacher,
                strategy,
                alpha,
                tau,
                softmax_axis,
            } = a;
            let d = commands::DistillFlags {
                teacher,
                strategy,
                alpha,
                tau,
                softmax_axis,
            };
            commands::train(&ctx, commands::Stage::Distill, train, Some(d))
        }
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Analyze(a) => commands::analyze(&ctx, a),
        Command::Table(a) => table::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
