//! `faultarm`: collect demonstrations, fit stats, train, evaluate, report,
//! replay and serve teleoperation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faultarm::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "faultarm", version, about = "Degradation-aware planar manipulator lab")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// JSON run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random stream.
    #[arg(long, global = true, env = "FAULTARM_SEED")]
    seed: Option<u64>,

    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,

    /// Scene JSON replacing the built-in desk scene.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the scripted expert and store successful episodes.
    CollectExpert(CollectArgs),
    /// Fit action normalization stats.
    Stats(StatsArgs),
    /// Train a policy by behavior cloning.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the expert) over the joint x weakness grid.
    Eval(EvalArgs),
    /// Compare two evaluation matrices.
    Report(ReportArgs),
    /// Serve the websocket teleoperation gateway.
    TeleopServe(TeleopArgs),
    /// Re-simulate stored episodes and re-check their success flags.
    Replay(ReplayArgs),
    /// Print per-component parameter counts.
    Describe(DescribeArgs),
    /// Write SVG frames of a stored episode.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct CollectArgs {
    /// Output JSONL file [default: <data_dir>/expert.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<usize>>,
    /// Rollouts per (joint, level) cell.
    #[arg(long)]
    per_cell: Option<usize>,
    /// Healthy rollouts.
    #[arg(long)]
    healthy: Option<usize>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Episode file or directory [default: <data_dir>].
    #[arg(long)]
    data: Option<PathBuf>,
    /// [default: <data_dir>/stats.json]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    low: Option<f64>,
    #[arg(long)]
    high: Option<f64>,
    /// Use only episodes recorded without degradation.
    #[arg(long)]
    healthy_only: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = ["baseline", "health", "frozen-trunk"])]
    mode: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    stats: PathBuf,
    /// [default: <checkpoint_dir>/<mode>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Baseline checkpoint for frozen-trunk training.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    healthy_only: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file, its path without `.json`, or a training directory.
    #[arg(long, required_unless_present = "expert", conflicts_with = "expert")]
    ckpt: Option<PathBuf>,
    /// Evaluate the scripted expert instead of a checkpoint.
    #[arg(long)]
    expert: bool,
    /// [default: stats.json next to the checkpoint]
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    joints: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<usize>>,
    /// Episodes per task in every cell.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    replan_every: Option<usize>,
    /// Evaluate only the healthy cell.
    #[arg(long)]
    healthy_only: bool,
    /// [default: <report_dir>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Baseline `matrix.json` or the directory holding it.
    baseline: PathBuf,
    /// Second model's `matrix.json` or directory.
    ours: PathBuf,
    #[arg(long, default_value = "md", value_parser = ["md", "markdown", "csv"])]
    format: String,
    /// Per-task table instead of the joint x level comparison.
    #[arg(long)]
    per_task: bool,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TeleopArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8714)]
    port: u16,
    #[arg(long, default_value_t = 20.0)]
    tick_hz: f64,
    /// [default: <data_dir>/teleop]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    file: PathBuf,
    /// Only this episode index.
    #[arg(long)]
    episode: Option<usize>,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    /// Describe this checkpoint instead of a fresh desk-scale policy.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    file: PathBuf,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, default_value = "frames")]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    every: usize,
}

/// Runtime failure with a stable machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl From<faultarm::Error> for Failure {
    fn from(e: faultarm::Error) -> Self {
        use faultarm::Error as E;
        let kind = match &e {
            E::HealthOutOfRange { .. }
            | E::WeaknessOutOfRange { .. }
            | E::JointOutOfRange { .. }
            | E::InvalidInterval { .. }
            | E::UnknownTask { .. }
            | E::Config(_) => "config",
            E::Dimension { .. } => "dimension",
            E::Parse { .. } | E::Json(_) => "parse",
            E::InsufficientData(_) => "data",
            E::Checkpoint(_) => "checkpoint",
            E::NonFiniteLoss { .. } => "diverged",
            E::Io { .. } => "io",
        };
        Failure::new(kind, e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w as usize);
    }
    if cli.scene.is_some() {
        cfg.scene = cli.scene.clone();
    }
    commands::apply_overrides(&mut cfg, &cli.command);
    let scene = cfg.load_scene()?;
    cfg.validate(&scene)?;
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new("config", e.to_string()))?;
    }
    commands::dispatch(&cfg, scene, cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": { "kind": f.kind, "message": f.message } });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
