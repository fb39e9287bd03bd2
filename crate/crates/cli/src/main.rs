mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage or unreadable/invalid input: exit code 2.
    Input(String),
    /// Anything else: exit code 1.
    Internal(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }
}

#[derive(Parser)]
#[command(name = "flowtrack", version, about = "Tracking by detection with optical-flow prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track objects through a frame sequence.
    Track(TrackArgs),
    /// Compute the motion field between two PGM frames.
    Flow(FlowArgs),
    /// Cluster box sizes into anchor boxes.
    Anchors(AnchorArgs),
    /// Write a synthetic sequence with detections and ground truth.
    Synth(SynthArgs),
    /// Time the sequential and concurrent execution modes.
    Bench(BenchArgs),
    /// Score track output against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sequential,
    Concurrent,
}

impl FromStr for ModeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Mot,
}

impl FromStr for FormatArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

/// Flow solver settings shared by `track`, `flow` and `bench`.
#[derive(Args, Debug, Clone, Default)]
pub struct FlowFlags {
    /// Data-term weight (lambda).
    #[arg(long)]
    pub data_weight: Option<f32>,
    #[arg(long)]
    pub huber_epsilon: Option<f32>,
    #[arg(long)]
    pub time_step: Option<f32>,
    /// Warps per pyramid scale.
    #[arg(long)]
    pub warps: Option<usize>,
    /// Solver iterations per warp.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Flow pyramid scales; chosen from the frame size when omitted.
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub median_filter: Option<bool>,
}

/// Settings shared by `track` and `bench`.
#[derive(Args, Debug, Clone)]
pub struct PipelineFlags {
    /// PGM file or directory of PGM frames, or a Y4M file.
    pub frames: PathBuf,
    /// Detection JSONL for the first detector.
    #[arg(long)]
    pub detections: PathBuf,
    /// Detection JSONL for a second detector, merged per frame.
    #[arg(long)]
    pub detections2: Option<PathBuf>,
    /// `key = value` settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<ModeArg>,
    /// Preprocess frame t+1 while frame t is processed (one frame of lag).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub prefetch: Option<bool>,
    /// Minimum IOU for a match.
    #[arg(long)]
    pub gate: Option<f64>,
    #[arg(long)]
    pub min_score: Option<f64>,
    /// Pyramid level for processing; chosen from the frame size when omitted.
    #[arg(long)]
    pub level: Option<usize>,
    /// Frames an unmatched object keeps coasting before it is lost.
    #[arg(long)]
    pub max_coast: Option<u32>,
    /// Weight of the predicted box when a match refreshes it.
    #[arg(long)]
    pub box_blend: Option<f64>,
    #[arg(long)]
    pub smoothing_weight: Option<f32>,
    #[arg(long)]
    pub blend: Option<f32>,
    #[arg(long)]
    pub rof_iterations: Option<usize>,
    #[command(flatten)]
    pub flow: FlowFlags,
}

#[derive(Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<FormatArg>,
}

#[derive(Args)]
pub struct FlowArgs {
    pub prev: PathBuf,
    pub curr: PathBuf,
    /// Write the field in Middlebury `.flo` format.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Apply the structure-texture preprocessing first.
    #[arg(long)]
    pub preprocess: bool,
    #[command(flatten)]
    pub flow: FlowFlags,
}

#[derive(Args)]
pub struct AnchorArgs {
    /// JSONL of boxes: `[w, h]`, `{"w": .., "h": ..}` or detection records.
    pub boxes: PathBuf,
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Distance used for clustering.
    #[arg(long, value_enum, default_value_t = MetricArg::Iou)]
    pub metric: MetricArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Iou,
    Euclidean,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Scene description (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Position jitter sigma in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Width/height jitter sigma in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub size_jitter: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Mean false positives per frame.
    #[arg(long, default_value_t = 0.0)]
    pub false_positives: f64,
    #[arg(long, default_value_t = 1.0)]
    pub score_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub score_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Simulated detector inference time per frame, in milliseconds.
    #[arg(long, default_value_t = 0)]
    pub latency_ms: u64,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Track output: JSONL, MOT CSV (`.txt`/`.csv`) or a second ground-truth file.
    pub tracks: PathBuf,
    /// Ground-truth JSONL.
    pub truth: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Track(a) => commands::track(a),
        Command::Flow(a) => commands::flow(a),
        Command::Anchors(a) => commands::anchors(a),
        Command::Synth(a) => commands::synth(a),
        Command::Bench(a) => commands::bench(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}
