//! `wildtrap`: camera-trap ingest service and operator tooling.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod backends;
mod commands;
mod remote;
mod server;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use backends::BackendSpec;

#[derive(Parser, Debug)]
#[command(name = "wildtrap", version, about = "Camera-trap ingest, detection and evaluation")]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
    #[command(subcommand)]
    Fleet(FleetCmd),
    #[command(subcommand)]
    Alerts(AlertsCmd),
    #[command(subcommand)]
    Curation(CurationCmd),
    #[command(subcommand)]
    Detector(DetectorCmd),
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    /// JSON service configuration; flags and environment take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "WILDTRAP_LISTEN")]
    listen: Option<String>,
    #[arg(long, env = "WILDTRAP_STORE")]
    store: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Model profile JSON; defaults to the built-in savanna profile.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, env = "WILDTRAP_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
}

#[derive(Args, Debug, Clone)]
pub struct BackendArgs {
    /// `synthetic-truth`, `empty`, or an http(s) base URL of a detector.
    #[arg(long, default_value = "synthetic-truth")]
    backend: BackendSpec,
    /// Jitter for the synthetic-truth backend, in pixels.
    #[arg(long, default_value_t = 0.0)]
    jitter_px: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-call timeout for remote detectors, in milliseconds.
    #[arg(long, default_value_t = 30_000)]
    detector_timeout_ms: u64,
}

#[derive(Subcommand, Debug)]
enum PipelineCmd {
    /// Detect on every stored image not yet processed.
    Run {
        #[arg(long, env = "WILDTRAP_STORE")]
        store: PathBuf,
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long, default_value_t = 3)]
        retry_limit: u32,
        #[arg(long)]
        min_confidence: Option<f64>,
    },
    /// Write stored events as evaluation detections keyed by ground-truth image id.
    ExportDetections {
        #[arg(long, env = "WILDTRAP_STORE")]
        store: PathBuf,
        /// COCO file whose `file_name`s are content hashes.
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    Run {
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value = "all_points")]
        interpolation: wildtrap::eval::Interpolation,
        /// Also write the full report JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write per-class and combined PR curves as CSV into this directory.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    Throughput {
        #[arg(long, default_value_t = 5.0)]
        latency_ms: f64,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
        #[arg(long, default_value_t = 20_000)]
        images: usize,
    },
}

#[derive(Subcommand, Debug)]
enum FleetCmd {
    Simulate {
        #[arg(long, env = "WILDTRAP_STORE")]
        store: PathBuf,
        #[arg(long, default_value_t = 10)]
        cameras: usize,
        #[arg(long, default_value_t = 10)]
        images_per_camera: usize,
        #[arg(long, default_value_t = 0.0)]
        drop_rate: f64,
        #[arg(long, default_value_t = 50.0)]
        latency_ms: f64,
        #[arg(long, default_value_t = 1_000_000.0)]
        bandwidth_bytes_per_s: f64,
        #[arg(long, default_value_t = 5)]
        max_retries: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        ack_loss_share: f64,
        /// Write COCO ground truth for the generated images here.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum AlertsCmd {
    /// Replay stored events through the rules and dispatch the alerts.
    Simulate {
        #[arg(long, env = "WILDTRAP_STORE")]
        store: PathBuf,
        /// Rules JSON; defaults to the night-intrusion rule.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Channel output file (JSON Lines).
        #[arg(long)]
        channel: Option<PathBuf>,
        /// Audit log; defaults to a fresh file next to the channel output.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum CurationCmd {
    Export {
        #[arg(long, env = "WILDTRAP_STORE")]
        store: PathBuf,
        /// Corrections JSON Lines; defaults to those received by the service.
        #[arg(long)]
        corrections: Option<PathBuf>,
        #[arg(long, default_value = "confirm_only")]
        policy: wildtrap::curation::GroundTruthPolicy,
        #[arg(long)]
        out: PathBuf,
    },
    Augment {
        #[arg(long)]
        image: PathBuf,
        /// Truth sidecar JSON for the image.
        #[arg(long)]
        truth: PathBuf,
        /// AugmentSpec JSON; overrides the individual flags.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Clockwise degrees, repeatable.
        #[arg(long = "rotate")]
        rotations: Vec<u16>,
        /// `DX,DY`, repeatable.
        #[arg(long = "translate", value_parser = parse_offset, allow_hyphen_values = true)]
        translations: Vec<(i64, i64)>,
        #[arg(long)]
        flip: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_variants: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum DetectorCmd {
    /// Serve the detect protocol, answering every image with fixed detections.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8090")]
        listen: String,
        #[arg(long, default_value = "savanna-demo-v1")]
        model_id: String,
        /// JSON array of detections in resized-image coordinates.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
}

fn parse_offset(s: &str) -> Result<(i64, i64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("`{s}` is not DX,DY"))?;
    Ok((
        a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
        b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
