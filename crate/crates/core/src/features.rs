//! Grid-constrained ORB features and pyramidal Lucas–Kanade tracking.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::image::GrayImage;

/// Bresenham circle of radius 3 used by the FAST segment test.
pub const FAST_CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];
pub const FAST_ARC: usize = 9;
pub const FAST_MARGIN: usize = 3;
/// Keypoints closer than this to the border cannot be described.
pub const DESCRIPTOR_MARGIN: usize = 19;
pub const ORIENTATION_RADIUS: i32 = 15;
pub const BRIEF_SEED: u64 = 0x5EED;
pub const BRIEF_SIGMA: f64 = 6.0;
pub const BRIEF_HALF_PATCH: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
    /// Radians, from the intensity centroid.
    pub orientation: f64,
    pub level: usize,
}

impl Keypoint {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// 256-bit binary descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
}

/// Segment-test response at `(x, y)`: the largest sum of absolute differences
/// over a maximal contiguous arc of at least 9 pixels that are all brighter
/// than `I + t` or all darker than `I − t`. `None` when no such arc exists.
///
/// Scoring the whole run rather than 9 pixels ranks true corners above the
/// straight-edge pixels next to them.
pub fn fast_response(img: &GrayImage, x: usize, y: usize, threshold: f32) -> Option<f64> {
    let w = img.width() as isize;
    let offsets: [isize; 16] = std::array::from_fn(|k| FAST_CIRCLE[k].1 as isize * w + FAST_CIRCLE[k].0 as isize);
    fast_response_at(img.data(), y * img.width() + x, &offsets, threshold)
}

fn fast_response_at(data: &[f32], i: usize, offsets: &[isize; 16], threshold: f32) -> Option<f64> {
    let c = data[i];
    let at = |k: usize| data[(i as isize + offsets[k]) as usize];
    // quick rejection: a 9-arc covers at least two of the four compass points
    let compass = [at(0), at(4), at(8), at(12)];
    let bright = compass.iter().filter(|&&v| v > c + threshold).count();
    let dark = compass.iter().filter(|&&v| v < c - threshold).count();
    if bright < 2 && dark < 2 {
        return None;
    }
    let ring: [f32; 16] = std::array::from_fn(at);
    let mut best: Option<f64> = None;
    for sign in [1.0f32, -1.0] {
        let pass: [bool; 16] = std::array::from_fn(|k| sign * (ring[k] - c) > threshold);
        let n_pass = pass.iter().filter(|&&p| p).count();
        if n_pass < FAST_ARC {
            continue;
        }
        if n_pass == 16 {
            let sad: f64 = ring.iter().map(|&v| (v - c).abs() as f64).sum();
            best = Some(best.map_or(sad, |b: f64| b.max(sad)));
            continue;
        }
        // walk maximal runs starting right after a failing position
        for start in (0..16).filter(|&s| pass[s] && !pass[(s + 15) % 16]) {
            let mut len = 0;
            let mut sad = 0.0f64;
            while pass[(start + len) % 16] {
                sad += (ring[(start + len) % 16] - c).abs() as f64;
                len += 1;
            }
            if len >= FAST_ARC {
                best = Some(best.map_or(sad, |b: f64| b.max(sad)));
            }
        }
    }
    best
}

/// Angle of the intensity centroid over a disc around the point.
pub fn intensity_centroid_angle(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let r = ORIENTATION_RADIUS as isize;
    let (mut m10, mut m01) = (0.0f64, 0.0f64);
    for v in -r..=r {
        for u in -r..=r {
            if u * u + v * v > r * r {
                continue;
            }
            let i = img.get_clamped(cx + u, cy + v) as f64;
            m10 += u as f64 * i;
            m01 += v as f64 * i;
        }
    }
    m01.atan2(m10)
}

/// FAST-9 corners with 3×3 non-maximum suppression on the response.
///
/// Equal responses are resolved in raster order: a pixel survives only if it
/// is strictly above earlier neighbors and not below later ones.
pub fn detect_fast(img: &GrayImage, threshold: f32) -> Vec<Keypoint> {
    let mut kps = fast_corners(img, threshold);
    for k in &mut kps {
        k.orientation = intensity_centroid_angle(img, k.x, k.y);
    }
    kps
}

/// `detect_fast` without orientations.
fn fast_corners(img: &GrayImage, threshold: f32) -> Vec<Keypoint> {
    let (w, h) = img.dims();
    if w < 2 * FAST_MARGIN + 1 || h < 2 * FAST_MARGIN + 1 {
        return Vec::new();
    }
    let offsets: [isize; 16] = std::array::from_fn(|k| FAST_CIRCLE[k].1 as isize * w as isize + FAST_CIRCLE[k].0 as isize);
    let data = img.data();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w];
            if y >= FAST_MARGIN && y < h - FAST_MARGIN {
                for (x, r) in row.iter_mut().enumerate().take(w - FAST_MARGIN).skip(FAST_MARGIN) {
                    *r = fast_response_at(data, y * w + x, &offsets, threshold).unwrap_or(0.0);
                }
            }
            row
        })
        .collect();
    let mut out = Vec::new();
    for y in FAST_MARGIN..h - FAST_MARGIN {
        for x in FAST_MARGIN..w - FAST_MARGIN {
            let r = rows[y][x];
            if r <= 0.0 {
                continue;
            }
            let mut keep = true;
            'nms: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = rows[(y as i32 + dy) as usize][(x as i32 + dx) as usize];
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > r || (earlier && n == r) {
                        keep = false;
                        break 'nms;
                    }
                }
            }
            if keep {
                let (fx, fy) = (x as f64, y as f64);
                out.push(Keypoint { x: fx, y: fy, response: r, orientation: 0.0, level: 0 });
            }
        }
    }
    out
}

/// FAST corners far enough from the border to be described.
pub fn detect_describable(img: &GrayImage, threshold: f32) -> Vec<Keypoint> {
    let (w, h) = img.dims();
    detect_fast(img, threshold).into_iter().filter(|k| describable(k, w, h)).collect()
}

fn describable(k: &Keypoint, w: usize, h: usize) -> bool {
    let m = DESCRIPTOR_MARGIN as f64;
    k.x >= m && k.y >= m && k.x <= (w - 1) as f64 - m && k.y <= (h - 1) as f64 - m
}

/// The frozen test-pair pattern: 256 pairs drawn once from an isotropic
/// Gaussian and clipped to the 31×31 patch.
pub fn brief_pattern() -> &'static [[(f64, f64); 2]; 256] {
    static PATTERN: OnceLock<[[(f64, f64); 2]; 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(BRIEF_SEED);
        let normal = Normal::new(0.0, BRIEF_SIGMA).expect("valid sigma");
        let mut draw = || {
            let v: f64 = normal.sample(&mut rng);
            v.round().clamp(-BRIEF_HALF_PATCH, BRIEF_HALF_PATCH)
        };
        let mut pat = [[(0.0, 0.0); 2]; 256];
        for pair in pat.iter_mut() {
            loop {
                let a = (draw(), draw());
                let b = (draw(), draw());
                if a != b {
                    *pair = [a, b];
                    break;
                }
            }
        }
        pat
    })
}

/// Steered BRIEF descriptors. Keypoints within the border margin yield
/// `Err(BorderKeypoint)` in their slot instead of a descriptor.
pub fn orb_describe(img: &GrayImage, kps: &[Keypoint]) -> Vec<Result<Descriptor>> {
    let (w, h) = img.dims();
    let pattern = brief_pattern();
    kps.iter()
        .enumerate()
        .map(|(i, k)| {
            if !describable(k, w, h) {
                return Err(Error::BorderKeypoint { index: i });
            }
            let (s, c) = k.orientation.sin_cos();
            let at = |(u, v): (f64, f64)| {
                let x = k.x + c * u - s * v;
                let y = k.y + s * u + c * v;
                img.sample(x as f32, y as f32)
            };
            let mut bits = [0u64; 4];
            for (b, [p, q]) in pattern.iter().enumerate() {
                if at(*p) < at(*q) {
                    bits[b / 64] |= 1 << (b % 64);
                }
            }
            Ok(Descriptor(bits))
        })
        .collect()
}

/// Cell index `(row, col)` of a position on an `rows × cols` grid.
pub fn grid_cell(x: f64, y: f64, rows: usize, cols: usize, width: usize, height: usize) -> (usize, usize) {
    let r = ((y * rows as f64 / height as f64).floor().max(0.0) as usize).min(rows - 1);
    let c = ((x * cols as f64 / width as f64).floor().max(0.0) as usize).min(cols - 1);
    (r, c)
}

fn better(a: &Keypoint, b: &Keypoint) -> bool {
    a.response > b.response || (a.response == b.response && (a.y, a.x) < (b.y, b.x))
}

/// Strongest keypoint of every non-empty cell, ordered by cell. Equal
/// responses go to the keypoint that comes first in `(y, x)` order.
pub fn grid_select(kps: &[Keypoint], rows: usize, cols: usize, width: usize, height: usize) -> Result<Vec<Keypoint>> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("grid must be at least 1x1, got {rows}x{cols}")));
    }
    let mut cells: Vec<Option<Keypoint>> = vec![None; rows * cols];
    for k in kps {
        let (r, c) = grid_cell(k.x, k.y, rows, cols, width, height);
        let slot = &mut cells[r * cols + c];
        match slot {
            Some(cur) if !better(k, cur) => {}
            _ => *slot = Some(*k),
        }
    }
    Ok(cells.into_iter().flatten().collect())
}

/// Gaussian image pyramid; level `l` has half the resolution of `l − 1`.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<GrayImage>,
}

fn downsample(img: &GrayImage) -> GrayImage {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = img.dims();
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    // horizontal pass at even columns, then vertical at even rows
    let tmp = GrayImage::from_fn(nw, h, |x, y| {
        K.iter().enumerate().map(|(i, k)| k * img.get_clamped(2 * x as isize + i as isize - 2, y as isize)).sum()
    });
    GrayImage::from_fn(nw, nh, |x, y| {
        K.iter().enumerate().map(|(i, k)| k * tmp.get_clamped(x as isize, 2 * y as isize + i as isize - 2)).sum()
    })
}

impl Pyramid {
    pub fn build(img: &GrayImage, levels: usize) -> Self {
        let mut out = vec![img.clone()];
        for _ in 1..levels.max(1) {
            let last = out.last().expect("non-empty");
            if last.width() < 16 || last.height() < 16 {
                break;
            }
            out.push(downsample(last));
        }
        Self { levels: out }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KltConfig {
    /// Odd window side (px).
    pub window: usize,
    pub levels: usize,
    pub max_iters: usize,
    /// Convergence threshold on the update norm (px).
    pub eps: f64,
    /// Points whose final RMS patch residual exceeds this are lost.
    pub max_residual: f64,
    /// Minimum eigenvalue of the mean gradient outer product.
    pub min_eigen: f64,
}

impl Default for KltConfig {
    fn default() -> Self {
        Self { window: 21, levels: 3, max_iters: 30, eps: 0.01, max_residual: 0.15, min_eigen: 1e-5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Live,
    Lost,
}

impl std::fmt::Display for TrackStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrackStatus::Live => "live",
            TrackStatus::Lost => "lost",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KltResult {
    pub pos: Vec2,
    pub status: TrackStatus,
    /// RMS photometric residual over the window at the finest level.
    pub residual: f64,
}

struct Template {
    values: Vec<f32>,
    grads: Vec<(f32, f32)>,
    hinv: [[f64; 2]; 2],
}

fn template(img: &GrayImage, p: Vec2, half: i32, min_eigen: f64) -> Option<Template> {
    let side = (2 * half + 1) as usize;
    // one extra ring for the central differences
    let mut ext = Vec::with_capacity((side + 2) * (side + 2));
    img.sample_patch(p.x, p.y, half as usize + 1, &mut ext);
    let es = side + 2;
    let mut values = Vec::with_capacity(side * side);
    let mut grads = Vec::with_capacity(side * side);
    let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for r in 1..=side {
        for col in 1..=side {
            let i = r * es + col;
            let gx = 0.5 * (ext[i + 1] - ext[i - 1]);
            let gy = 0.5 * (ext[i + es] - ext[i - es]);
            values.push(ext[i]);
            grads.push((gx, gy));
            a += (gx * gx) as f64;
            b += (gx * gy) as f64;
            c += (gy * gy) as f64;
        }
    }
    let nn = (side * side) as f64;
    let min_eig = 0.5 * ((a + c) - ((a - c) * (a - c) + 4.0 * b * b).sqrt()) / nn;
    if !(min_eig >= min_eigen) {
        return None;
    }
    let det = a * c - b * b;
    Some(Template { values, grads, hinv: [[c / det, -b / det], [-b / det, a / det]] })
}

fn inside(img: &GrayImage, p: Vec2, half: i32) -> bool {
    let h = half as f64;
    p.x >= h && p.y >= h && p.x <= img.width() as f64 - 1.0 - h && p.y <= img.height() as f64 - 1.0 - h
}

fn rms_residual(t: &Template, img: &GrayImage, q: Vec2, half: i32) -> f64 {
    let mut patch = Vec::with_capacity(t.values.len());
    img.sample_patch(q.x, q.y, half as usize, &mut patch);
    let s: f64 = patch.iter().zip(&t.values).map(|(v, t)| ((v - t) * (v - t)) as f64).sum();
    (s / patch.len() as f64).sqrt()
}

/// Tracks one point from `prev` to `next`, starting from `guess` in level-0
/// coordinates.
fn track_point(prev: &Pyramid, next: &Pyramid, p: Vec2, guess: Vec2, cfg: &KltConfig) -> KltResult {
    let half = (cfg.window / 2) as i32;
    let lost = |pos| KltResult { pos, status: TrackStatus::Lost, residual: f64::INFINITY };
    let top = prev.len().min(next.len()) - 1;
    let mut d = (guess - p) / (1u32 << top) as f64;
    let mut finest: Option<Template> = None;
    let mut patch = Vec::new();
    for level in (0..=top).rev() {
        let scale = (1u32 << level) as f64;
        let pl = p / scale;
        let (ip, inx) = (&prev.levels[level], &next.levels[level]);
        let Some(t) = template(ip, pl, half, cfg.min_eigen) else {
            if level == 0 {
                return lost(p + d);
            }
            d *= 2.0;
            continue;
        };
        for _ in 0..cfg.max_iters {
            let q = pl + d;
            if !q.x.is_finite() || q.x < -(half as f64) || q.y < -(half as f64) || q.x > inx.width() as f64 + half as f64 || q.y > inx.height() as f64 + half as f64 {
                return lost(p + d * scale);
            }
            inx.sample_patch(q.x, q.y, half as usize, &mut patch);
            let (mut bx, mut by) = (0.0f32, 0.0f32);
            for ((v, t), (gx, gy)) in patch.iter().zip(&t.values).zip(&t.grads) {
                let e = v - t;
                bx += gx * e;
                by += gy * e;
            }
            let (bx, by) = (bx as f64, by as f64);
            let dx = t.hinv[0][0] * bx + t.hinv[0][1] * by;
            let dy = t.hinv[1][0] * bx + t.hinv[1][1] * by;
            d -= Vec2::new(dx, dy);
            if dx.hypot(dy) < cfg.eps {
                break;
            }
        }
        if level > 0 {
            d *= 2.0;
        } else {
            finest = Some(t);
        }
    }
    let q = p + d;
    let base = &next.levels[0];
    if !inside(base, q, half) {
        return lost(q);
    }
    let residual = rms_residual(finest.as_ref().expect("level 0 template"), base, q, half);
    let status = if residual <= cfg.max_residual { TrackStatus::Live } else { TrackStatus::Lost };
    KltResult { pos: q, status, residual }
}

/// Inverse-compositional pyramidal Lucas–Kanade, coarse to fine. `guesses`
/// seeds the displacement per point (defaults to zero motion).
pub fn klt_track(prev: &Pyramid, next: &Pyramid, points: &[Vec2], guesses: Option<&[Vec2]>, cfg: &KltConfig) -> Vec<KltResult> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let guess = guesses.map_or(p, |g| g[i]);
            if prev.is_empty() || next.is_empty() || !inside(&prev.levels[0], p, 0) {
                return KltResult { pos: guess, status: TrackStatus::Lost, residual: f64::INFINITY };
            }
            track_point(prev, next, p, guess, cfg)
        })
        .collect()
}

/// A feature followed across frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    /// `(frame_id, position)` per observed frame.
    pub positions: Vec<(u64, Vec2)>,
    pub response: f64,
    pub status: TrackStatus,
    pub last_residual: f64,
}

impl Track {
    pub fn last(&self) -> Vec2 {
        self.positions.last().expect("tracks start with one position").1
    }

    pub fn last_frame(&self) -> u64 {
        self.positions.last().expect("tracks start with one position").0
    }
}

/// One row of the track CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRow {
    pub frame_id: u64,
    pub track_id: u64,
    pub x: f64,
    pub y: f64,
    pub response: f64,
    pub status: TrackStatus,
}

pub const TRACK_CSV_HEADER: &str = "frame_id,track_id,x,y,response,status";

pub fn write_track_csv<W: Write>(mut w: W, rows: &[TrackRow]) -> std::io::Result<()> {
    writeln!(w, "{TRACK_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:.4},{:.4},{:.6},{}", r.frame_id, r.track_id, r.x, r.y, r.response, r.status)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub fast_threshold: f32,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// New features are not spawned within this distance of live tracks (px).
    pub min_distance: f64,
    /// After frame-to-frame tracking, each track is re-aligned against the
    /// patch where it was born, which stops per-frame errors from piling up.
    /// A re-aligned position further than this from the frame-to-frame one
    /// (px) re-anchors the track instead. Zero disables anchoring.
    pub anchor_max_jump: f64,
    pub klt: KltConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { fast_threshold: 20.0 / 255.0, grid_rows: 8, grid_cols: 10, min_distance: 10.0, anchor_max_jump: 1.0, klt: KltConfig::default() }
    }
}

/// Single-writer track bookkeeping: lost tracks are retired and never reused.
#[derive(Debug, Default)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    live: BTreeMap<u64, Track>,
    next_id: u64,
    prev: Option<(u64, Arc<Pyramid>)>,
    /// Birth patch per live track: the pyramid and the position in it.
    anchors: BTreeMap<u64, (Arc<Pyramid>, Vec2)>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self { cfg, live: BTreeMap::new(), next_id: 0, prev: None, anchors: BTreeMap::new() }
    }

    pub fn live_tracks(&self) -> impl Iterator<Item = &Track> {
        self.live.values()
    }

    pub fn num_live(&self) -> usize {
        self.live.len()
    }

    /// Drops a track, e.g. after outlier rejection.
    pub fn retire(&mut self, id: u64) -> Option<Track> {
        self.anchors.remove(&id);
        self.live.remove(&id)
    }

    /// Processes one frame: tracks live features (seeded by `predict`, which
    /// maps a track's last position to its expected position), retires lost
    /// ones, then tops up empty grid cells with fresh detections.
    ///
    /// Returns the CSV rows for this frame, including tracks lost here.
    pub fn process(&mut self, frame_id: u64, img: &GrayImage, predict: impl Fn(u64, Vec2) -> Vec2) -> Vec<TrackRow> {
        let pyr = Arc::new(Pyramid::build(img, self.cfg.klt.levels));
        let mut rows = Vec::new();
        if let Some((_, prev)) = &self.prev {
            let ids: Vec<u64> = self.live.keys().copied().collect();
            let pts: Vec<Vec2> = ids.iter().map(|id| self.live[id].last()).collect();
            let guesses: Vec<Vec2> = ids.iter().zip(&pts).map(|(id, p)| predict(*id, *p)).collect();
            let mut results = klt_track(prev, &pyr, &pts, Some(&guesses), &self.cfg.klt);
            if self.cfg.anchor_max_jump > 0.0 {
                let refined: Vec<Option<KltResult>> = ids
                    .par_iter()
                    .zip(&results)
                    .map(|(id, r)| {
                        let (apyr, apos) = self.anchors.get(id)?;
                        if r.status != TrackStatus::Live {
                            return None;
                        }
                        Some(track_point(apyr, &pyr, *apos, r.pos, &self.cfg.klt))
                    })
                    .collect();
                for ((id, r), a) in ids.iter().zip(results.iter_mut()).zip(refined) {
                    match a {
                        Some(a) if a.status == TrackStatus::Live && (a.pos - r.pos).norm() <= self.cfg.anchor_max_jump => {
                            r.pos = a.pos;
                        }
                        _ if r.status == TrackStatus::Live => {
                            self.anchors.insert(*id, (Arc::clone(&pyr), r.pos));
                        }
                        _ => {}
                    }
                }
            }
            for (id, r) in ids.into_iter().zip(results) {
                let track = self.live.get_mut(&id).expect("live id");
                track.last_residual = r.residual;
                rows.push(TrackRow { frame_id, track_id: id, x: r.pos.x, y: r.pos.y, response: track.response, status: r.status });
                if r.status == TrackStatus::Live {
                    track.positions.push((frame_id, r.pos));
                } else {
                    track.status = TrackStatus::Lost;
                    self.live.remove(&id);
                    self.anchors.remove(&id);
                }
            }
        }
        let (w, h) = img.dims();
        let (gr, gc) = (self.cfg.grid_rows, self.cfg.grid_cols);
        let mut occupied = vec![false; gr * gc];
        for t in self.live.values() {
            let p = t.last();
            let (r, c) = grid_cell(p.x, p.y, gr, gc, w, h);
            occupied[r * gc + c] = true;
        }
        let kps: Vec<Keypoint> = fast_corners(img, self.cfg.fast_threshold).into_iter().filter(|k| describable(k, w, h)).collect();
        let min_d2 = self.cfg.min_distance * self.cfg.min_distance;
        let candidates: Vec<Keypoint> = kps
            .into_iter()
            .filter(|k| {
                let (r, c) = grid_cell(k.x, k.y, gr, gc, w, h);
                !occupied[r * gc + c] && self.live.values().all(|t| (t.last() - k.pos()).norm_squared() >= min_d2)
            })
            .collect();
        for mut k in grid_select(&candidates, gr, gc, w, h).expect("grid validated by config") {
            k.orientation = intensity_centroid_angle(img, k.x, k.y);
            let id = self.next_id;
            self.next_id += 1;
            self.anchors.insert(id, (Arc::clone(&pyr), k.pos()));
            self.live.insert(
                id,
                Track { id, positions: vec![(frame_id, k.pos())], response: k.response, status: TrackStatus::Live, last_residual: 0.0 },
            );
            rows.push(TrackRow { frame_id, track_id: id, x: k.x, y: k.y, response: k.response, status: TrackStatus::Live });
        }
        self.prev = Some((frame_id, pyr));
        rows
    }
}
