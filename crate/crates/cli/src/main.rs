//! `mocae`: calibrate, fuse and evaluate object-detector mixtures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mocae_core::fuse::NmsKind;
use mocae_core::geometry::GeometryKind;
use mocae_core::metrics::{AceDenominator, ApRule, ReliabilityFormat, SweepParam};

use config::{serde_value, MethodArg, ModeArg, Preset, WeightingArg};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or unreadable, malformed input.
    #[error("{0}")]
    Usage(String),
    /// The computation itself failed.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failure(_) => 2,
        }
    }
}

impl From<mocae_core::Error> for CliError {
    fn from(e: mocae_core::Error) -> Self {
        match e {
            mocae_core::Error::Fit(_) => CliError::Failure(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mocae",
    version,
    about = "Calibrate, fuse and evaluate mixtures of object detectors"
)]
struct Cli {
    /// Worker threads [default: all cores]
    #[arg(long, global = true, env = "MOCAE_THREADS")]
    threads: Option<usize>,

    /// JSON run configuration; keys match long flag names with underscores,
    /// and flags override them [default: none]
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit score calibrators against IoU targets
    Calibrate(CalibrateArgs),
    /// Calibrate and aggregate the detections of several experts
    Fuse(FuseArgs),
    /// COCO-style AP/AR and localisation-aware calibration errors
    Eval(EvalArgs),
    /// Export reliability-diagram bins as CSV or SVG
    Reliability(ReliabilityArgs),
    /// Evaluate AP while varying one aggregation setting
    Sweep(SweepArgs),
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Check that the Oracle MoE reaches AP = N_TP/M on synthetic scenes
    OracleCheck(OracleCheckArgs),
    /// Compare single experts, the vanilla and the calibrated mixture
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Detection results JSON (COCO results format) [required]
    #[arg(long, value_name = "FILE")]
    dets: Option<PathBuf>,

    /// Ground-truth JSON with an `annotations` list [required]
    #[arg(long, value_name = "FILE")]
    gt: Option<PathBuf>,

    /// Box geometry: axis-aligned ([x, y, w, h]) or rotated ([cx, cy, w, h, theta]) [default: axis-aligned]
    #[arg(long, value_parser = serde_value::<GeometryKind>)]
    geometry: Option<GeometryKind>,
}

#[derive(Debug, Args)]
struct ReportArg {
    /// Also write the machine-readable JSON report here [default: none]
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    input: InputArgs,

    /// Calibrator: ir (isotonic), lr (linear) or identity [default: ir]
    #[arg(long, value_parser = serde_value::<MethodArg>)]
    method: Option<MethodArg>,

    /// ca (one calibrator for all classes) or cw (one per class) [default: ca]
    #[arg(long, value_parser = serde_value::<ModeArg>)]
    mode: Option<ModeArg>,

    /// Calibrator JSON to write [required]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Confidence bins for the printed LaECE [default: 25]
    #[arg(long)]
    bins: Option<usize>,

    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Default, Args)]
pub struct FusionArgs {
    /// Suppression: standard, soft-linear or soft-gaussian [default: soft-linear; sweep: standard]
    #[arg(long, value_parser = serde_value::<NmsKind>)]
    nms: Option<NmsKind>,

    /// IoU threshold of standard and linear Soft NMS [default: 0.65 axis-aligned, 0.35 rotated]
    #[arg(long)]
    iou_nms: Option<f64>,

    /// Gaussian Soft NMS sigma [default: 0.4]
    #[arg(long)]
    sigma_nms: Option<f64>,

    /// Score Voting box refinement, true or false [default: true with soft NMS, false with standard]
    #[arg(long)]
    score_voting: Option<bool>,

    /// Score Voting sigma [default: 0.04]
    #[arg(long)]
    sigma_sv: Option<f64>,

    /// Drop detections scoring below this before suppression [default: 0]
    #[arg(long)]
    background_threshold: Option<f64>,

    /// Detections kept per image after aggregation [default: 100]
    #[arg(long)]
    top_k: Option<usize>,

    /// Drop Soft-NMS rescored detections scoring below this [default: 0.001]
    #[arg(long)]
    prune_after_soft: Option<f64>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Detection JSON of one expert; repeat per expert [required]
    #[arg(long, value_name = "FILE", num_args = 1..)]
    dets: Vec<PathBuf>,

    /// Calibrator JSON per expert, in --dets order, or `identity`; a single
    /// `identity` applies to every expert [default: identity]
    #[arg(long, value_name = "FILE|identity", num_args = 1..)]
    cal: Vec<String>,

    /// Fused detection JSON to write [required]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Box geometry: axis-aligned or rotated [default: axis-aligned]
    #[arg(long, value_parser = serde_value::<GeometryKind>)]
    geometry: Option<GeometryKind>,

    #[command(flatten)]
    fusion: FusionArgs,

    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Default, Args)]
pub struct ApArgs {
    /// Comma-separated IoU thresholds [default: 0.50,0.55,...,0.95]
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,

    /// Detections per image and class considered [default: 100]
    #[arg(long)]
    max_dets: Option<usize>,

    /// AP summary: coco101 (101 recall points) or area (exact area) [default: coco101]
    #[arg(long, value_parser = serde_value::<ApRule>)]
    ap_rule: Option<ApRule>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,

    #[command(flatten)]
    ap: ApArgs,

    /// Confidence bins for LaECE, LaACE and LaMCE [default: 25]
    #[arg(long)]
    bins: Option<usize>,

    /// LaACE denominator: non-empty or all-bins [default: non-empty]
    #[arg(long, value_parser = serde_value::<AceDenominator>)]
    ace: Option<AceDenominator>,

    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Args)]
struct ReliabilityArgs {
    #[command(flatten)]
    input: InputArgs,

    /// Number of equal-width confidence bins [default: 25]
    #[arg(long)]
    bins: Option<usize>,

    /// Bin target: reduced (mean IoU target) or precision (precision x mean TP IoU) [default: reduced]
    #[arg(long, value_parser = serde_value::<WeightingArg>)]
    weighting: Option<WeightingArg>,

    /// TP threshold for precision weighting [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,

    /// Output format: csv or svg [default: csv]
    #[arg(long, value_parser = serde_value::<ReliabilityFormat>)]
    format: Option<ReliabilityFormat>,

    /// File to write [required]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,

    /// Setting to vary: background-threshold, sigma-nms or iou-nms [default: background-threshold]
    #[arg(long, value_parser = serde_value::<SweepParam>)]
    param: Option<SweepParam>,

    /// Comma-separated values to try [default: 0,0.001,0.01,0.05,0.1,0.2,0.3]
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,

    #[command(flatten)]
    fusion: FusionArgs,

    #[command(flatten)]
    ap: ApArgs,

    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// Built-in scene specification: theorem or demo [default: demo for synth and demo, theorem for oracle-check]
    #[arg(long, value_parser = serde_value::<Preset>)]
    preset: Option<Preset>,

    /// Scene specification JSON, used instead of a preset [default: none]
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,

    /// Random seed [default: the specification's seed]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    spec: SpecArgs,

    /// Directory receiving gt.json, expert_<i>.json and spec.json [required]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleCheckArgs {
    #[command(flatten)]
    spec: SpecArgs,

    /// Number of scenes [default: 100]
    #[arg(long)]
    scenes: Option<usize>,

    /// Comma-separated IoU thresholds [default: 0.5,0.75]
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,

    /// Standard-NMS IoU threshold [default: 0.5]
    #[arg(long)]
    iou_nms: Option<f64>,

    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[command(flatten)]
    spec: SpecArgs,

    #[command(flatten)]
    fusion: FusionArgs,

    #[command(flatten)]
    report: ReportArg,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    let rc = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Calibrate(a) => commands::calibrate(a, rc),
        Command::Fuse(a) => commands::fuse(a, rc),
        Command::Eval(a) => commands::eval(a, rc),
        Command::Reliability(a) => commands::reliability(a, rc),
        Command::Sweep(a) => commands::sweep(a, rc),
        Command::Synth(a) => commands::synth(a, rc),
        Command::OracleCheck(a) => commands::oracle_check(a, rc),
        Command::Demo(a) => commands::demo(a, rc),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
