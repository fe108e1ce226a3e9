//! Turning command-line flags into a validated configuration and a depth source.

use std::path::{Path, PathBuf};

use evio_core::config::PipelineConfig;
use evio_core::dataset::Dataset;
use evio_core::depth_prior::{ConstantDepth, DepthSource, FileDepth};

use crate::{ConfigArgs, Failure, PipelineArgs};

pub const THREADS_ENV: &str = "EVIO_THREADS";

pub fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn pipeline_config(args: &PipelineArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = load_config(&args.config)?;
    let mut set = |k: &str, v: &str| cfg.set(k, v);
    if let Some(v) = &args.frame_mode {
        set("compensation.frame_mode", v)?;
    }
    if let Some(v) = &args.ref_time {
        set("compensation.ref_time", v)?;
    }
    if args.no_align {
        set("compensation.align", "false")?;
    }
    if let Some(v) = &args.warp_depth {
        set("compensation.warp_depth", v)?;
    }
    if let Some(v) = &args.enhance_method {
        set("enhance.method", v)?;
    }
    if args.no_depth_prior {
        set("depth.enabled", "false")?;
    }
    if let Some(g) = &args.grid {
        set("features.grid_rows", &g[0].to_string())?;
        set("features.grid_cols", &g[1].to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `EVIO_THREADS`, else `--threads`, else the config value. Zero leaves the
/// pool at one worker per core.
pub fn resolve_threads(flag: Option<usize>, configured: usize) -> Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a count, got `{v}`"))),
        Err(_) => Ok(flag.unwrap_or(configured)),
    }
}

pub fn init_threads(flag: Option<usize>, configured: usize) -> Result<(), Failure> {
    let n = resolve_threads(flag, configured)?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
    }
    log::info!("worker threads: {}", rayon::current_num_threads());
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum DepthChoice {
    /// The dataset's own `depth/` folder.
    GroundTruth,
    Constant(f64),
    Dir(PathBuf),
}

impl std::str::FromStr for DepthChoice {
    type Err = Failure;

    fn from_str(s: &str) -> Result<Self, Failure> {
        if s == "gt" {
            return Ok(DepthChoice::GroundTruth);
        }
        if let Some(m) = s.strip_prefix("const:") {
            return match m.parse::<f64>() {
                Ok(d) if d > 0.0 && d.is_finite() => Ok(DepthChoice::Constant(d)),
                _ => Err(Failure::Usage(format!("const depth must be a positive number of meters, got `{m}`"))),
            };
        }
        if let Some(dir) = s.strip_prefix("file:") {
            return Ok(DepthChoice::Dir(PathBuf::from(dir)));
        }
        Err(Failure::Usage(format!("unknown depth source `{s}` (gt, const:<m> or file:<dir>)")))
    }
}

fn open_dir(dir: &Path) -> Result<Box<dyn DepthSource>, Failure> {
    Ok(Box::new(FileDepth::open(dir)?))
}

/// The depth source for a run, or `None` when the prior is off or the
/// dataset has no depth and none was requested.
pub fn depth_source(
    choice: Option<&str>,
    cfg: &PipelineConfig,
    data: &Dataset,
) -> Result<Option<Box<dyn DepthSource>>, Failure> {
    if !cfg.depth.enabled {
        return Ok(None);
    }
    let choice = match choice {
        Some(s) => s.parse()?,
        None if data.depth_dir().is_dir() => DepthChoice::GroundTruth,
        None => {
            log::warn!("{} has no depth/ folder; running without depth observations", data.dir.display());
            return Ok(None);
        }
    };
    match choice {
        DepthChoice::GroundTruth => open_dir(&data.depth_dir()).map(Some),
        DepthChoice::Constant(d) => Ok(Some(Box::new(ConstantDepth(d)))),
        DepthChoice::Dir(dir) => open_dir(&dir).map(Some),
    }
}
