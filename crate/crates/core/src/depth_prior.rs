//! Scene-depth prior: pluggable depth sources, central-ROI mean depth,
//! exponential smoothing with validity bounds, and the inverse-depth soft
//! residual `(ρ̄ − s·ρ_roi)² / Σ` with its global scale `s`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::event_stream::{format_seconds, parse_seconds, Nanos};
use crate::geometry::Vec2;
use crate::image::{read_pgm, write_pgm16};

/// Distance kept between a smoothed depth and its bounds (m).
pub const CLAMP_EPS: f64 = 1e-6;

/// Per-pixel depth in meters; zero, negative or non-finite entries are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::InvalidArgument(format!("{} values for a {width}x{height} depth map", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, depth: f32) -> Self {
        Self { width, height, data: vec![depth; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let v = self.data[y * self.width + x];
        (v.is_finite() && v > 0.0).then_some(v as f64)
    }

    /// Depth at the nearest pixel, `None` when outside or invalid.
    pub fn at(&self, px: &Vec2) -> Option<f64> {
        let x = px.x.round();
        let y = px.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        self.get(x as usize, y as usize)
    }

    /// Millimeter quantization used by the PGM16 format (0 = invalid).
    pub fn to_millimeters(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|&d| if d.is_finite() && d > 0.0 { (d as f64 * 1000.0).round().clamp(1.0, 65535.0) as u16 } else { 0 })
            .collect()
    }

    pub fn from_millimeters(width: usize, height: usize, mm: &[u16]) -> Result<Self> {
        Self::new(width, height, mm.iter().map(|&v| if v == 0 { 0.0 } else { v as f32 / 1000.0 }).collect())
    }

    pub fn write_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pgm16(path, self.width, self.height, &self.to_millimeters())
    }

    pub fn read_pgm16(path: impl AsRef<Path>) -> Result<Self> {
        let pgm = read_pgm(path)?;
        Self::from_millimeters(pgm.width, pgm.height, &pgm.data)
    }
}

/// What a depth source returns for one instant.
#[derive(Clone, Debug)]
pub enum DepthObservation {
    /// A single scene depth for every pixel.
    Constant(f64),
    Map(DepthMap),
}

impl DepthObservation {
    pub fn is_per_pixel(&self) -> bool {
        matches!(self, DepthObservation::Map(_))
    }

    /// Depth at a pixel; constant observations answer everywhere.
    pub fn at(&self, px: &Vec2) -> Option<f64> {
        match self {
            DepthObservation::Constant(d) => Some(*d),
            DepthObservation::Map(m) => m.at(px),
        }
    }
}

/// Stand-in for a learned event-to-depth estimator.
pub trait DepthSource: Send + Sync {
    fn observe(&self, t: Nanos) -> Result<DepthObservation>;
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantDepth(pub f64);

impl DepthSource for ConstantDepth {
    fn observe(&self, _t: Nanos) -> Result<DepthObservation> {
        Ok(DepthObservation::Constant(self.0))
    }
}

/// Per-frame PGM16 depth maps listed in `timestamps.txt` (`t_sec filename`).
pub struct FileDepth {
    dir: PathBuf,
    frames: Vec<(Nanos, String)>,
    cache: Mutex<Option<(usize, DepthMap)>>,
}

pub const DEPTH_INDEX_FILE: &str = "timestamps.txt";

impl FileDepth {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let index = dir.join(DEPTH_INDEX_FILE);
        let file = fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
        let mut frames = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&index, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (ts, name) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::parse(i + 1, "expected `t_sec filename`"))?;
            let t = parse_seconds(ts).ok_or_else(|| Error::parse(i + 1, format!("bad timestamp `{ts}`")))?;
            frames.push((t, name.trim().to_string()));
        }
        if frames.is_empty() {
            return Err(Error::parse(1, format!("{} lists no depth frames", index.display())));
        }
        frames.sort_by_key(|f| f.0);
        Ok(Self { dir, frames, cache: Mutex::new(None) })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn nearest(&self, t: Nanos) -> usize {
        let i = self.frames.partition_point(|f| f.0 < t);
        if i == 0 {
            0
        } else if i == self.frames.len() || t - self.frames[i - 1].0 <= self.frames[i].0 - t {
            i - 1
        } else {
            i
        }
    }
}

impl DepthSource for FileDepth {
    fn observe(&self, t: Nanos) -> Result<DepthObservation> {
        let idx = self.nearest(t);
        let mut cache = self.cache.lock().expect("depth cache poisoned");
        if let Some((i, map)) = cache.as_ref() {
            if *i == idx {
                return Ok(DepthObservation::Map(map.clone()));
            }
        }
        let map = DepthMap::read_pgm16(self.dir.join(&self.frames[idx].1))?;
        *cache = Some((idx, map.clone()));
        Ok(DepthObservation::Map(map))
    }
}

/// Writes depth maps as `NNNNNN.pgm` plus the `timestamps.txt` index.
pub fn write_depth_frames(dir: impl AsRef<Path>, frames: &[(Nanos, DepthMap)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = dir.join(DEPTH_INDEX_FILE);
    let mut out = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    for (i, (t, map)) in frames.iter().enumerate() {
        let name = format!("{i:06}.pgm");
        map.write_pgm16(dir.join(&name))?;
        writeln!(out, "{} {name}", format_seconds(*t)).map_err(|e| Error::io(&index, e))?;
    }
    Ok(())
}

/// Mean of valid depths inside the centered rectangle covering `fraction` of
/// each image dimension.
pub fn roi_mean_depth(obs: &DepthObservation, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("ROI fraction must be in (0, 1], got {fraction}")));
    }
    let map = match obs {
        DepthObservation::Constant(d) => {
            return if d.is_finite() && *d > 0.0 { Ok(*d) } else { Err(Error::EmptyRoi) };
        }
        DepthObservation::Map(m) => m,
    };
    let roi_w = ((map.width as f64 * fraction).round() as usize).clamp(1, map.width);
    let roi_h = ((map.height as f64 * fraction).round() as usize).clamp(1, map.height);
    let x0 = (map.width - roi_w) / 2;
    let y0 = (map.height - roi_h) / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..y0 + roi_h {
        for x in x0..x0 + roi_w {
            if let Some(d) = map.get(x, y) {
                sum += d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyRoi);
    }
    Ok(sum / n as f64)
}

/// Recursive state of the exponential depth smoother.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthState {
    /// Previous smoothed depth; `None` before the first update.
    pub d_prev: Option<f64>,
    pub alpha: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthState {
    pub fn new(alpha: f64, d_min: f64, d_max: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("depth smoothing factor must be in (0, 1], got {alpha}")));
        }
        if !(d_min < d_max && d_max - d_min > 2.0 * CLAMP_EPS) {
            return Err(Error::Config(format!("depth bounds must satisfy d_min < d_max, got ({d_min}, {d_max})")));
        }
        Ok(Self { d_prev: None, alpha, d_min, d_max })
    }

    pub fn clamp(&self, d: f64) -> f64 {
        d.clamp(self.d_min + CLAMP_EPS, self.d_max - CLAMP_EPS)
    }
}

/// `d_t = α·d̄ + (1 − α)·d_prev`, kept strictly inside `(d_min, d_max)`.
///
/// The first update has no history and takes `d̄` directly.
pub fn smooth_depth(d_bar: f64, state: &mut DepthState) -> f64 {
    let raw = match state.d_prev {
        Some(prev) => state.alpha * d_bar + (1.0 - state.alpha) * prev,
        None => d_bar,
    };
    let d = state.clamp(raw);
    state.d_prev = Some(d);
    d
}

/// Inverse-depth prior between landmark statistics and the ROI depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthResidualTerm {
    /// Mean landmark inverse depth in the current keyframe (1/m).
    pub rho_bar: f64,
    /// Inverse of the smoothed ROI depth (1/m).
    pub rho_roi: f64,
    /// Global scale.
    pub s: f64,
    /// Variance of the residual ((1/m)²).
    pub sigma: f64,
}

impl DepthResidualTerm {
    pub fn residual(&self) -> f64 {
        self.rho_bar - self.s * self.rho_roi
    }
}

/// `(ρ̄ − s·ρ_roi)² / Σ`
pub fn depth_residual(term: &DepthResidualTerm) -> f64 {
    let r = term.residual();
    r * r / term.sigma
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleSample {
    pub rho_bar: f64,
    pub rho_roi: f64,
    pub sigma: f64,
}

/// Closed-form minimizer of `Σ (ρ̄ − s·ρ)² / σ` over `s`.
pub fn estimate_scale(samples: &[ScaleSample]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for s in samples.iter().filter(|s| s.rho_roi > 0.0 && s.sigma > 0.0) {
        num += s.rho_bar * s.rho_roi / s.sigma;
        den += s.rho_roi * s.rho_roi / s.sigma;
    }
    if den < 1e-12 {
        return Err(Error::DegenerateScale { denominator: den });
    }
    Ok(num / den)
}

/// How the residual variance is chosen per keyframe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaMode {
    Constant,
    /// `Σ = sigma · d̄²`: distant depth estimates are trusted less.
    ProportionalToDepthSquared,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SigmaMode::Constant),
            "depth2" | "proportional" => Ok(SigmaMode::ProportionalToDepthSquared),
            other => Err(Error::Config(format!("unknown sigma mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaMode::Constant => "constant",
            SigmaMode::ProportionalToDepthSquared => "depth2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthPriorConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub roi_fraction: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub sigma: f64,
    pub sigma_mode: SigmaMode,
    /// Every this many frames is a keyframe at which the scale is refit.
    pub keyframe_interval: usize,
}

impl Default for DepthPriorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.3,
            roi_fraction: 0.25,
            d_min: 0.2,
            d_max: 20.0,
            sigma: 0.0025,
            sigma_mode: SigmaMode::Constant,
            keyframe_interval: 5,
        }
    }
}

impl DepthPriorConfig {
    pub fn sigma_for(&self, d_bar: f64) -> f64 {
        match self.sigma_mode {
            SigmaMode::Constant => self.sigma,
            SigmaMode::ProportionalToDepthSquared => self.sigma * d_bar * d_bar,
        }
    }
}
