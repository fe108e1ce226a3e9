//! `evio`: simulate event datasets and run the odometry front end on them.
//!
//! Exit code 1 means a run failed and 2 means bad usage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod pipeline;

#[derive(Parser, Debug)]
#[command(name = "evio", version, about = "Edge-enhanced event-camera visual odometry")]
struct Cli {
    /// Worker threads (0 = one per core). EVIO_THREADS takes precedence.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// More log output; repeat for debug messages.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (events, IMU, ground truth, calibration, depth).
    Simulate(SimulateArgs),
    /// Run the odometry on a dataset and write `traj_est.txt`.
    Run(RunArgs),
    /// Enhance one PGM image, optionally writing every intermediate stage.
    Enhance(EnhanceArgs),
    /// Run the pipeline and write the feature tracks as CSV.
    Track(TrackArgs),
    /// Absolute position error of an estimated trajectory.
    Eval(EvalArgs),
    /// Per-stage timing, median over repeated runs.
    Bench(BenchArgs),
    /// Print the configuration keys with their values.
    Config(ConfigCmd),
}

/// Configuration sources, applied in order: defaults, file, `--set`.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set klt.window=15`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Default)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "count|signed")]
    pub frame_mode: Option<String>,
    #[arg(long, value_name = "start|mid")]
    pub ref_time: Option<String>,
    /// Disable the correlation-based alignment correction.
    #[arg(long)]
    pub no_align: bool,
    /// Depth prior input. Default: the dataset's `depth/` folder when present.
    #[arg(long, value_name = "gt|const:<m>|file:<dir>")]
    pub depth_source: Option<String>,
    /// Depth used to warp events.
    #[arg(long, value_name = "scene|landmarks")]
    pub warp_depth: Option<String>,
    #[arg(long = "enhance.method", value_name = "sobel|canny|laplacian|clahe-only")]
    pub enhance_method: Option<String>,
    #[arg(long)]
    pub no_depth_prior: bool,
    /// Feature grid rows and columns.
    #[arg(long, num_args = 2, value_names = ["R", "C"])]
    pub grid: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// checkerboard, stripes or blobs.
    #[arg(long)]
    pub scene: Option<String>,
    /// static, line, circle, square, yaw-spin or spline.
    #[arg(long)]
    pub trajectory: Option<String>,
    /// Seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Log-intensity change per event.
    #[arg(long)]
    pub contrast: Option<f64>,
    /// Spurious events per pixel per second.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Depth frames per second written to `depth/` (0 = none).
    #[arg(long)]
    pub depth_rate: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Dataset directory.
    pub dataset: PathBuf,
    /// Trajectory output (default: `<dataset>/traj_est.txt`).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Input PGM (8 or 16 bit).
    pub input: PathBuf,
    /// Enhanced output PGM.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write `blur`, `clahe`, `enhanced`, `edge` and `output` PGMs here.
    #[arg(long, value_name = "DIR")]
    pub dump_stages: Option<PathBuf>,
    #[arg(long = "enhance.method", value_name = "sobel|canny|laplacian|clahe-only")]
    pub method: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    pub dataset: PathBuf,
    /// Track CSV output.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Write the event frame and enhanced frame of every packet as PGM here.
    #[arg(long, value_name = "DIR")]
    pub dump_frames: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub est: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    #[arg(long, default_value = "se3", value_name = "se3|sim3|none")]
    pub align: String,
    /// Per-pose CSV of aligned positions and residuals.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    /// Largest timestamp gap for association (seconds).
    #[arg(long, value_name = "SEC")]
    pub max_dt: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
pub struct ConfigCmd {
    /// Print the built-in defaults, ignoring any file or overrides.
    #[arg(long)]
    pub defaults: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<evio_core::Error> for Failure {
    fn from(e: evio_core::Error) -> Self {
        match e {
            evio_core::Error::Config(_) | evio_core::Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("EVIO_LOG").init();
    let threads = cli.threads;
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a, threads),
        Command::Run(a) => commands::run(a, threads),
        Command::Enhance(a) => commands::enhance(a, threads),
        Command::Track(a) => commands::track(a, threads),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a, threads),
        Command::Config(a) => commands::config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
