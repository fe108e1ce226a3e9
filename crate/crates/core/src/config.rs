//! Flat `module.key = value` configuration for the whole pipeline.
//!
//! Defaults live in each module's `Default` impl; this file only maps keys to
//! fields. `PipelineConfig::dump` output parses back to an equal config.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::depth_prior::DepthPriorConfig;
use crate::error::{Error, Result};
use crate::estimator::RansacConfig;
use crate::event_stream::Nanos;
use crate::features::TrackerConfig;
use crate::frame_enhance::EnhanceConfig;
use crate::motion_compensation::{FrameMode, RefTime};

/// How events are grouped into packets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PacketMode {
    Time,
    Count,
}

impl FromStr for PacketMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(PacketMode::Time),
            "count" => Ok(PacketMode::Count),
            other => Err(Error::Config(format!("unknown packet mode `{other}`"))),
        }
    }
}

impl Display for PacketMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PacketMode::Time => "time",
            PacketMode::Count => "count",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PacketConfig {
    pub mode: PacketMode,
    pub window_ms: f64,
    pub overlap_ms: f64,
    pub count: usize,
    pub count_overlap: usize,
}

impl Default for PacketConfig {
    fn default() -> Self {
        Self { mode: PacketMode::Time, window_ms: 20.0, overlap_ms: 10.0, count: 5000, count_overlap: 2500 }
    }
}

impl PacketConfig {
    pub fn window_ns(&self) -> Nanos {
        (self.window_ms * 1e6).round() as Nanos
    }

    pub fn overlap_ns(&self) -> Nanos {
        (self.overlap_ms * 1e6).round() as Nanos
    }
}

/// Depth used to lift events during compensation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpDepth {
    /// Per-pixel source depth when available, else the smoothed scene depth.
    Scene,
    /// Median camera depth of the landmarks in view.
    Landmarks,
}

impl FromStr for WarpDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(WarpDepth::Scene),
            "landmarks" => Ok(WarpDepth::Landmarks),
            other => Err(Error::Config(format!("unknown warp depth `{other}`"))),
        }
    }
}

impl Display for WarpDepth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WarpDepth::Scene => "scene",
            WarpDepth::Landmarks => "landmarks",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompensationConfig {
    pub frame_mode: FrameMode,
    pub ref_time: RefTime,
    /// Apply the frame-to-frame alignment correction.
    pub align: bool,
    pub warp_depth: WarpDepth,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self { frame_mode: FrameMode::Count, ref_time: RefTime::Start, align: true, warp_depth: WarpDepth::Scene }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    /// Landmark depth (m) used when the depth prior is disabled.
    pub init_depth: f64,
    /// Minimum ray angle before a coarse landmark is re-triangulated (deg).
    pub triangulation_min_angle_deg: f64,
    /// Triangulations with a larger reprojection error are discarded (px).
    pub max_triangulation_error: f64,
    /// Use gyro integration for the rotation prediction.
    pub use_imu: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { init_depth: 1.0, triangulation_min_angle_deg: 2.0, max_triangulation_error: 1.0, use_imu: true }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_depth > 0.0) {
            return Err(Error::Config(format!("estimator.init_depth must be positive, got {}", self.init_depth)));
        }
        if !(self.max_triangulation_error > 0.0) || !(self.triangulation_min_angle_deg >= 0.0) {
            return Err(Error::Config("estimator triangulation limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PipelineConfig {
    pub packet: PacketConfig,
    pub compensation: CompensationConfig,
    pub enhance: EnhanceConfig,
    pub tracker: TrackerConfig,
    pub depth: DepthPriorConfig,
    pub ransac: RansacConfig,
    pub estimator: EstimatorConfig,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
}

fn parse_into<T>(slot: &mut T, key: &str, value: &str) -> Result<()>
where
    T: FromStr,
    T::Err: Display,
{
    *slot = value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))?;
    Ok(())
}

macro_rules! config_keys {
    ($($key:literal => [$($field:tt)+] $doc:literal;)*) => {
        const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl PipelineConfig {
            /// Current value of a key, formatted as the parser expects it.
            pub fn get(&self, key: &str) -> Result<String> {
                match key {
                    $($key => Ok(self.$($field)+.to_string()),)*
                    _ => Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }

            /// Sets one key from its text form. Unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => parse_into(&mut self.$($field)+, key, value.trim()),)*
                    _ => Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
        }
    };
}

config_keys! {
    "packet.mode" => [packet.mode] "time | count";
    "packet.window_ms" => [packet.window_ms] "packet duration in time mode (ms)";
    "packet.overlap_ms" => [packet.overlap_ms] "overlap between consecutive packets (ms)";
    "packet.count" => [packet.count] "events per packet in count mode";
    "packet.count_overlap" => [packet.count_overlap] "shared events between packets in count mode";
    "compensation.frame_mode" => [compensation.frame_mode] "count | signed";
    "compensation.ref_time" => [compensation.ref_time] "start | mid";
    "compensation.align" => [compensation.align] "apply the frame-to-frame alignment correction";
    "compensation.warp_depth" => [compensation.warp_depth] "scene | landmarks";
    "enhance.sigma" => [enhance.sigma] "gaussian blur sigma (px)";
    "enhance.lambda" => [enhance.lambda] "unsharp gain, 0 disables sharpening";
    "enhance.method" => [enhance.method] "sobel | canny | laplacian | clahe-only";
    "enhance.thinning" => [enhance.thinning] "erode the edge map";
    "enhance.erode_size" => [enhance.erode_size] "odd erosion element side (px)";
    "enhance.alpha" => [enhance.alpha] "weight of the event frame in the blend";
    "enhance.beta" => [enhance.beta] "weight of the edge map in the blend";
    "enhance.clahe_rows" => [enhance.clahe_tiles.0] "CLAHE tile rows";
    "enhance.clahe_cols" => [enhance.clahe_tiles.1] "CLAHE tile columns";
    "enhance.clahe_clip" => [enhance.clahe_clip] "CLAHE clip limit (multiple of the mean bin)";
    "enhance.canny_low" => [enhance.canny_low] "canny low threshold on the normalized gradient";
    "enhance.canny_high" => [enhance.canny_high] "canny high threshold on the normalized gradient";
    "features.fast_threshold" => [tracker.fast_threshold] "FAST intensity threshold (image units)";
    "features.grid_rows" => [tracker.grid_rows] "feature grid rows";
    "features.grid_cols" => [tracker.grid_cols] "feature grid columns";
    "features.min_distance" => [tracker.min_distance] "no new feature closer than this to a track (px)";
    "features.anchor_max_jump" => [tracker.anchor_max_jump] "re-anchor a track when its birth-patch fit moves it further than this (px, 0 disables)";
    "klt.window" => [tracker.klt.window] "odd patch side (px)";
    "klt.levels" => [tracker.klt.levels] "pyramid levels";
    "klt.max_iters" => [tracker.klt.max_iters] "iterations per level";
    "klt.eps" => [tracker.klt.eps] "update norm at convergence (px)";
    "klt.max_residual" => [tracker.klt.max_residual] "largest RMS patch residual of a live track";
    "klt.min_eigen" => [tracker.klt.min_eigen] "smallest eigenvalue of the patch structure tensor";
    "depth.enabled" => [depth.enabled] "use the scene-depth prior";
    "depth.alpha" => [depth.alpha] "smoothing weight of the newest ROI depth";
    "depth.roi_fraction" => [depth.roi_fraction] "central ROI size as a fraction of each dimension";
    "depth.d_min" => [depth.d_min] "lower depth clamp (m)";
    "depth.d_max" => [depth.d_max] "upper depth clamp (m)";
    "depth.sigma" => [depth.sigma] "variance of the inverse-depth residual ((1/m)^2)";
    "depth.sigma_mode" => [depth.sigma_mode] "constant | depth2";
    "depth.keyframe_interval" => [depth.keyframe_interval] "frames between keyframes";
    "ransac.max_iters" => [ransac.max_iters] "minimal-set trials";
    "ransac.threshold" => [ransac.threshold] "inlier reprojection threshold (px)";
    "ransac.min_inliers" => [ransac.min_inliers] "fewest inliers of an accepted pose";
    "ransac.seed" => [ransac.seed] "sampler seed";
    "estimator.init_depth" => [estimator.init_depth] "landmark depth without a depth prior (m)";
    "estimator.triangulation_min_angle_deg" => [estimator.triangulation_min_angle_deg] "ray angle before re-triangulating (deg)";
    "estimator.max_triangulation_error" => [estimator.max_triangulation_error] "largest accepted triangulation reprojection error (px)";
    "estimator.use_imu" => [estimator.use_imu] "gyro rotation in the motion prediction";
    "runtime.threads" => [threads] "worker threads, 0 = automatic";
}

impl PipelineConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _)| *k)
    }

    /// Every key with its current value and a one-line description.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let value = self.get(key).expect("listed key");
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        out
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.packet;
        if !(p.window_ms > 0.0) || !(p.overlap_ms >= 0.0) || p.overlap_ms >= p.window_ms {
            return Err(Error::Config(format!(
                "packet window/overlap must satisfy 0 <= overlap < window, got {}/{}",
                p.window_ms, p.overlap_ms
            )));
        }
        if p.count == 0 || p.count_overlap >= p.count {
            return Err(Error::Config("packet.count must exceed packet.count_overlap".into()));
        }
        self.enhance.validate()?;
        let t = &self.tracker;
        if t.grid_rows == 0 || t.grid_cols == 0 {
            return Err(Error::Config("feature grid must have at least one cell".into()));
        }
        if t.klt.window % 2 == 0 || t.klt.window < 3 || t.klt.levels == 0 {
            return Err(Error::Config("klt.window must be odd and >= 3, klt.levels >= 1".into()));
        }
        let d = &self.depth;
        if !(d.alpha > 0.0 && d.alpha <= 1.0) || !(0.0 < d.d_min && d.d_min < d.d_max) {
            return Err(Error::Config("depth prior needs 0 < alpha <= 1 and 0 < d_min < d_max".into()));
        }
        if !(d.roi_fraction > 0.0 && d.roi_fraction <= 1.0) || !(d.sigma > 0.0) || d.keyframe_interval == 0 {
            return Err(Error::Config("depth roi_fraction, sigma and keyframe_interval must be positive".into()));
        }
        self.ransac.validate()?;
        self.estimator.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_dump_is_a_fixpoint() {
        let cfg = PipelineConfig::default();
        let text = cfg.dump();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dump(), text);
    }

    #[test]
    fn every_key_round_trips() {
        let cfg = PipelineConfig::default();
        for key in PipelineConfig::keys() {
            let mut other = PipelineConfig::default();
            other.set(key, &cfg.get(key).unwrap()).unwrap();
            assert_eq!(other, cfg, "{key}");
        }
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(PipelineConfig::parse("enhance.nope = 1").is_err());
        assert!(PipelineConfig::parse("enhance.sigma 1").is_err());
        assert!(PipelineConfig::parse("enhance.sigma = abc").is_err());
        assert!(PipelineConfig::parse("packet.overlap_ms = 30").is_err());
    }

    #[test]
    fn values_and_comments_parse() {
        let cfg = PipelineConfig::parse("# ablation\nenhance.method = canny  # edge\nfeatures.grid_rows=4\n").unwrap();
        assert_eq!(cfg.enhance.method, crate::frame_enhance::EdgeMethod::Canny);
        assert_eq!(cfg.tracker.grid_rows, 4);
        assert_eq!(cfg.tracker.grid_cols, 10);
    }
}
