//! Event warping to a common reference time and accumulation into frames.
//!
//! Poses map camera to world. An event observed at pose `T_i` with depth `d`
//! is lifted to `d·K⁻¹[x, y, 1]ᵀ`, moved into the reference camera with
//! `T_ref⁻¹·T_i`, projected, and shifted by the alignment correction.

use std::path::Path;

use rayon::prelude::*;

use crate::depth_prior::DepthMap;
use crate::error::{Error, Result};
use crate::event_stream::{AugmentedPacket, Event, Nanos, Polarity};
use crate::geometry::{interpolate_pose, se3_exp, se3_log, Camera, Pose, Vec2};
use crate::image::GrayImage;

/// Splat positions are quantized to 1/256 px so that accumulation is exact
/// integer arithmetic; one event carries `FIXED_ONE` units of mass.
const SUBPIXEL_BITS: u32 = 8;
const SUBPIXEL: i64 = 1 << SUBPIXEL_BITS;
pub const FIXED_ONE: i64 = SUBPIXEL * SUBPIXEL;

/// Half-width of the correlation search in [`update_alignment`] (px).
pub const ALIGN_SEARCH: i32 = 5;
/// Peak correlation below which no correction is reported.
pub const ALIGN_MIN_NCC: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpedEvent {
    pub px: Vec2,
    pub polarity: Polarity,
    pub t: Nanos,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlignmentCorrection {
    pub delta: Vec2,
}

impl AlignmentCorrection {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(dx: f64, dy: f64) -> Self {
        Self { delta: Vec2::new(dx, dy) }
    }
}

/// Time the packet is warped to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RefTime {
    #[default]
    Start,
    Mid,
}

impl std::str::FromStr for RefTime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(RefTime::Start),
            "mid" => Ok(RefTime::Mid),
            other => Err(Error::Config(format!("unknown reference time `{other}`"))),
        }
    }
}

impl std::fmt::Display for RefTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RefTime::Start => "start",
            RefTime::Mid => "mid",
        })
    }
}

/// Depth used to lift each event.
#[derive(Clone, Copy, Debug)]
pub enum EventDepth<'a> {
    /// One scene depth for every event.
    Scene(f64),
    /// Per-pixel map; invalid pixels fall back to `fallback`.
    Map { map: &'a DepthMap, fallback: f64 },
    /// One depth per event, aligned with the packet's events.
    PerEvent(&'a [f64]),
}

impl EventDepth<'_> {
    fn depth(&self, i: usize, e: &Event) -> f64 {
        match *self {
            EventDepth::Scene(d) => d,
            EventDepth::Map { map, fallback } => map.get(e.x as usize, e.y as usize).unwrap_or(fallback),
            EventDepth::PerEvent(ds) => ds[i],
        }
    }
}

/// `π(T·d·K⁻¹[x, y, 1]ᵀ) − Δ` where `T` maps the event's camera into the
/// reference camera.
pub fn warp_event(e: &Event, t_rel: &Pose, depth: f64, cam: &Camera, corr: &AlignmentCorrection) -> Result<WarpedEvent> {
    let p = cam.backproject(&Vec2::new(e.x as f64, e.y as f64), depth)?;
    let q = t_rel.transform_point(&p);
    let px = cam.project(&q)? - corr.delta;
    Ok(WarpedEvent { px, polarity: e.polarity, t: e.t })
}

/// Warped events of one packet plus the events that could not be warped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompensatedPacket {
    pub ref_time: Nanos,
    pub events: Vec<WarpedEvent>,
    /// Events whose warped point fell behind the reference camera.
    pub behind_camera: usize,
}

/// Warps every event of the packet with its interpolated pose.
///
/// `pose0`/`pose1` are the camera poses at the packet bounds. The per-event
/// pose is the geodesic interpolation at `α = (t − t0)/(t1 − t0)`, clamped to
/// `[0, 1]`.
pub fn compensate_packet(
    ap: &AugmentedPacket,
    pose0: &Pose,
    pose1: &Pose,
    depth: EventDepth<'_>,
    cam: &Camera,
    corr: &AlignmentCorrection,
    ref_time: RefTime,
) -> Result<CompensatedPacket> {
    let packet = &ap.packet;
    if packet.t1 <= packet.t0 {
        return Err(Error::DegeneratePacket { t: packet.t0 });
    }
    if let EventDepth::PerEvent(ds) = depth {
        if ds.len() != packet.events.len() {
            return Err(Error::InvalidArgument(format!(
                "{} depths for {} events",
                ds.len(),
                packet.events.len()
            )));
        }
    }
    let xi = se3_log(&(pose0.inverse() * *pose1))?;
    let (t_ref, ref_ns) = match ref_time {
        RefTime::Start => (*pose0, packet.t0),
        RefTime::Mid => (interpolate_pose(pose0, pose1, 0.5)?, packet.t0 + packet.duration() / 2),
    };
    let ref_inv = t_ref.inverse();
    let span = packet.duration() as f64;
    let warp_one = |(i, e): (usize, &Event)| -> Result<Option<WarpedEvent>> {
        let alpha = ((e.t - packet.t0) as f64 / span).clamp(0.0, 1.0);
        let ti = if alpha == 0.0 { *pose0 } else { *pose0 * se3_exp(&xi.scaled(alpha)) };
        match warp_event(e, &(ref_inv * ti), depth.depth(i, e), cam, corr) {
            Ok(w) => Ok(Some(w)),
            Err(Error::BehindCamera { .. }) => Ok(None),
            Err(err) => Err(err),
        }
    };
    let warped: Vec<Option<WarpedEvent>> = if packet.events.len() >= 8192 {
        packet.events.par_iter().enumerate().map(warp_one).collect::<Result<_>>()?
    } else {
        packet.events.iter().enumerate().map(warp_one).collect::<Result<_>>()?
    };
    let behind_camera = warped.iter().filter(|w| w.is_none()).count();
    Ok(CompensatedPacket { ref_time: ref_ns, events: warped.into_iter().flatten().collect(), behind_camera })
}

/// Events passed through unchanged (no compensation).
pub fn unwarped(events: &[Event]) -> Vec<WarpedEvent> {
    events
        .iter()
        .map(|e| WarpedEvent { px: Vec2::new(e.x as f64, e.y as f64), polarity: e.polarity, t: e.t })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FrameMode {
    #[default]
    Count,
    Signed,
}

impl std::str::FromStr for FrameMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(FrameMode::Count),
            "signed" => Ok(FrameMode::Signed),
            other => Err(Error::Config(format!("unknown frame mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FrameMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrameMode::Count => "count",
            FrameMode::Signed => "signed",
        })
    }
}

/// Accumulated image of warped events in exact fixed point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventFrame {
    width: usize,
    height: usize,
    pub mode: FrameMode,
    pub ref_time: Nanos,
    acc: Vec<i64>,
    /// Events that landed outside the sensor and were skipped.
    pub out_of_bounds: usize,
}

impl EventFrame {
    pub fn new(width: usize, height: usize, mode: FrameMode, ref_time: Nanos) -> Self {
        Self { width, height, mode, ref_time, acc: vec![0; width * height], out_of_bounds: 0 }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.acc[y * self.width + x] as f64 / FIXED_ONE as f64
    }

    /// Sum of all pixel values, in events.
    pub fn total(&self) -> f64 {
        self.acc.iter().sum::<i64>() as f64 / FIXED_ONE as f64
    }

    /// Raw fixed-point accumulators (`FIXED_ONE` per event).
    pub fn raw(&self) -> &[i64] {
        &self.acc
    }

    /// Splats one event onto its four neighbors; returns false when outside.
    pub fn add(&mut self, e: &WarpedEvent) -> bool {
        let qx = (e.px.x * SUBPIXEL as f64).round();
        let qy = (e.px.y * SUBPIXEL as f64).round();
        let max_x = ((self.width - 1) as i64 * SUBPIXEL) as f64;
        let max_y = ((self.height - 1) as i64 * SUBPIXEL) as f64;
        if !(qx >= 0.0 && qy >= 0.0 && qx <= max_x && qy <= max_y) {
            self.out_of_bounds += 1;
            return false;
        }
        let (qx, qy) = (qx as i64, qy as i64);
        let (ix, iy) = ((qx >> SUBPIXEL_BITS) as usize, (qy >> SUBPIXEL_BITS) as usize);
        let (fx, fy) = (qx & (SUBPIXEL - 1), qy & (SUBPIXEL - 1));
        let sign = match self.mode {
            FrameMode::Count => 1,
            FrameMode::Signed => e.polarity.sign() as i64,
        };
        let i = iy * self.width + ix;
        self.acc[i] += sign * (SUBPIXEL - fx) * (SUBPIXEL - fy);
        if fx > 0 {
            self.acc[i + 1] += sign * fx * (SUBPIXEL - fy);
        }
        if fy > 0 {
            self.acc[i + self.width] += sign * (SUBPIXEL - fx) * fy;
            if fx > 0 {
                self.acc[i + self.width + 1] += sign * fx * fy;
            }
        }
        true
    }

    /// Pixelwise sum; the merge used by parallel accumulation.
    pub fn merge(&mut self, other: &EventFrame) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::DimensionMismatch { a: (self.width, self.height), b: (other.width, other.height) });
        }
        for (a, b) in self.acc.iter_mut().zip(&other.acc) {
            *a += b;
        }
        self.out_of_bounds += other.out_of_bounds;
        Ok(())
    }

    /// Unnormalized values as a float image.
    pub fn to_image(&self) -> GrayImage {
        let data = self.acc.iter().map(|&v| (v as f64 / FIXED_ONE as f64) as f32).collect();
        GrayImage::from_vec(self.width, self.height, data).expect("frame dimensions are valid")
    }

    /// Values mapped into `[0, 1]`: counts are max-normalized, signed values
    /// are centered at 0.5.
    pub fn to_gray(&self) -> GrayImage {
        let img = self.to_image();
        match self.mode {
            FrameMode::Count => img.max_normalized(),
            FrameMode::Signed => {
                let m = img.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
                if m > 0.0 {
                    img.map(|v| 0.5 + 0.5 * v / m)
                } else {
                    img.map(|_| 0.5)
                }
            }
        }
    }

    /// Writes the 8-bit normalized frame.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray().write_pgm(path)
    }
}

const PAR_CHUNK: usize = 65536;

/// Bilinear accumulation of warped events. Parallel partial frames are merged
/// by integer addition, so the result does not depend on the thread count.
pub fn accumulate_frame(events: &[WarpedEvent], cam: &Camera, mode: FrameMode, ref_time: Nanos) -> EventFrame {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let fill = |chunk: &[WarpedEvent]| {
        let mut f = EventFrame::new(w, h, mode, ref_time);
        for e in chunk {
            f.add(e);
        }
        f
    };
    if events.len() <= PAR_CHUNK {
        return fill(events);
    }
    events
        .par_chunks(PAR_CHUNK)
        .map(fill)
        .reduce_with(|mut a, b| {
            a.merge(&b).expect("same dimensions");
            a
        })
        .unwrap_or_else(|| EventFrame::new(w, h, mode, ref_time))
}

/// Summed-area table with a zero first row and column.
fn integral(v: impl Iterator<Item = f64>, w: usize, h: usize) -> Vec<f64> {
    let mut t = vec![0.0; (w + 1) * (h + 1)];
    let mut v = v;
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v.next().expect("w*h values");
            t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
        }
    }
    t
}

fn rect_sum(t: &[f64], w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
    let s = w + 1;
    t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0]
}

/// What the NCC search needs from the two frames: sums over rectangles
/// come from integral images, the cross term from the nonzero pixels of
/// `prev` (event frames are sparse).
struct NccInput<'a> {
    w: usize,
    h: usize,
    cur: &'a [f64],
    nonzero: Vec<(usize, usize, f64)>,
    sa: Vec<f64>,
    saa: Vec<f64>,
    sb: Vec<f64>,
    sbb: Vec<f64>,
}

impl<'a> NccInput<'a> {
    fn new(prev: &[f64], cur: &'a [f64], w: usize, h: usize) -> Self {
        let nonzero = prev.iter().enumerate().filter(|(_, &a)| a != 0.0).map(|(i, &a)| (i % w, i / w, a)).collect();
        Self {
            w,
            h,
            cur,
            nonzero,
            sa: integral(prev.iter().copied(), w, h),
            saa: integral(prev.iter().map(|a| a * a), w, h),
            sb: integral(cur.iter().copied(), w, h),
            sbb: integral(cur.iter().map(|b| b * b), w, h),
        }
    }

    fn ncc_at(&self, dx: i32, dy: i32) -> f64 {
        let (w, h) = (self.w, self.h);
        // overlap where cur(x + dx, y + dy) and prev(x, y) both exist
        let x0 = (-dx).max(0) as usize;
        let x1 = (w as i32 - dx.max(0)) as usize;
        let y0 = (-dy).max(0) as usize;
        let y1 = (h as i32 - dy.max(0)) as usize;
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        let (cx0, cy0) = ((x0 as i32 + dx) as usize, (y0 as i32 + dy) as usize);
        let (cx1, cy1) = ((x1 as i32 + dx) as usize, (y1 as i32 + dy) as usize);
        let sa = rect_sum(&self.sa, w, x0, y0, x1, y1);
        let saa = rect_sum(&self.saa, w, x0, y0, x1, y1);
        let sb = rect_sum(&self.sb, w, cx0, cy0, cx1, cy1);
        let sbb = rect_sum(&self.sbb, w, cx0, cy0, cx1, cy1);
        let mut sab = 0.0;
        for &(x, y, a) in &self.nonzero {
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                sab += a * self.cur[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
            }
        }
        let cov = sab - sa * sb / n;
        let va = saa - sa * sa / n;
        let vb = sbb - sb * sb / n;
        if va <= 1e-12 || vb <= 1e-12 {
            return 0.0;
        }
        cov / (va * vb).sqrt()
    }
}

fn parabola_offset(cm: f64, c0: f64, cp: f64) -> f64 {
    let den = cm - 2.0 * c0 + cp;
    if den >= -1e-12 {
        return 0.0;
    }
    (0.5 * (cm - cp) / den).clamp(-0.5, 0.5)
}

/// Translation `d` such that `cur(x + d) ≈ prev(x)`, found by normalized
/// cross-correlation over ±5 px and refined by per-axis parabola fits.
pub fn update_alignment(prev: &EventFrame, cur: &EventFrame) -> Result<AlignmentCorrection> {
    if (prev.width, prev.height) != (cur.width, cur.height) {
        return Err(Error::DimensionMismatch { a: (prev.width, prev.height), b: (cur.width, cur.height) });
    }
    let (w, h) = (prev.width, prev.height);
    let r = ALIGN_SEARCH;
    if w as i32 <= 2 * r + 1 || h as i32 <= 2 * r + 1 {
        return Ok(AlignmentCorrection::zero());
    }
    let a: Vec<f64> = prev.acc.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = cur.acc.iter().map(|&v| v as f64).collect();
    let side = (2 * r + 1) as usize;
    let input = NccInput::new(&a, &b, w, h);
    let scores: Vec<f64> =
        (0..side * side).into_par_iter().map(|k| input.ncc_at((k % side) as i32 - r, (k / side) as i32 - r)).collect();
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = k;
        }
    }
    if !(scores[best] >= ALIGN_MIN_NCC) {
        return Ok(AlignmentCorrection::zero());
    }
    let (bx, by) = (best % side, best / side);
    let at = |x: usize, y: usize| scores[y * side + x];
    let ox = if bx > 0 && bx + 1 < side { parabola_offset(at(bx - 1, by), at(bx, by), at(bx + 1, by)) } else { 0.0 };
    let oy = if by > 0 && by + 1 < side { parabola_offset(at(bx, by - 1), at(bx, by), at(bx, by + 1)) } else { 0.0 };
    Ok(AlignmentCorrection::new(bx as f64 - r as f64 + ox, by as f64 - r as f64 + oy))
}
