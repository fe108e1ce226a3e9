//! Synthetic event camera: textured planes, analytic trajectories, a linear
//! log-intensity event model, IMU synthesis and dataset export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::depth_prior::{write_depth_frames, DepthMap, DepthObservation, DepthSource};
use crate::error::{Error, Result};
use crate::event_stream::{write_events, write_imu, Event, ImuSample, Nanos, Polarity, NANOS_PER_SEC};
use crate::evaluation::{write_trajectory, TrajectoryFile};
use crate::geometry::{Camera, Pose, Rotation, Vec3};
use crate::image::GrayImage;

pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);

/// Log-intensity texture on a plane, in plane coordinates (m).
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    Constant(f64),
    /// Alternating squares; `edge` is the width of the linear ramp between them.
    Checkerboard { square: f64, low: f64, high: f64, edge: f64 },
    /// Stripes across the plane's x axis.
    Stripes { period: f64, low: f64, high: f64, edge: f64 },
    /// One randomly rotated square blob per `cell`, on a constant background.
    Blobs { cell: f64, min_half: f64, max_half: f64, background: f64, contrast: f64, edge: f64, seed: u64 },
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 16-bit slice `k` of a hash mapped to `[0, 1)`.
fn unit16(h: u64, k: u32) -> f64 {
    ((h >> (16 * k)) & 0xFFFF) as f64 / 65536.0
}

/// `floor` without a libm call on baseline x86-64.
#[inline]
fn fast_floor(x: f64) -> f64 {
    // plane coordinates over period stay far inside i32
    let i = x as i32 as f64;
    if i > x {
        i - 1.0
    } else {
        i
    }
}

/// Signed ramp across a periodic boundary set: ±1 away from boundaries,
/// linear within `edge/2` of them. Takes reciprocals to keep divisions out of
/// the per-pixel path.
#[inline]
fn soft_parity(x: f64, period: f64, inv_period: f64, inv_half_edge: f64) -> f64 {
    let k = fast_floor(x * inv_period);
    let r = x - k * period;
    let dist = r.min(period - r);
    let sign = 1.0 - 2.0 * ((k as i32) & 1) as f64;
    sign * (dist * inv_half_edge).min(1.0)
}

const ROTATION_TABLE_BITS: u32 = 10;

/// Blob rotations drawn from a fixed table of `2^10` angles in `[0, π/2)`.
fn rotation_table() -> &'static [(f64, f64)] {
    static TABLE: std::sync::OnceLock<Vec<(f64, f64)>> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let n = 1usize << ROTATION_TABLE_BITS;
        (0..n)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect()
    })
}

/// `Pattern` with reciprocals precomputed.
#[derive(Clone, Copy, Debug)]
enum Compiled {
    Constant(f64),
    Checker { square: f64, inv_square: f64, inv_half_edge: f64, mid: f64, amp: f64 },
    Stripes { period: f64, inv_period: f64, inv_half_edge: f64, mid: f64, amp: f64 },
    Blobs { cell: f64, inv_cell: f64, min_half: f64, span: f64, background: f64, contrast: f64, inv_edge: f64, seed: u64 },
}

impl Compiled {
    fn new(p: &Pattern) -> Self {
        match *p {
            Pattern::Constant(c) => Compiled::Constant(c),
            Pattern::Checkerboard { square, low, high, edge } => Compiled::Checker {
                square,
                inv_square: 1.0 / square,
                inv_half_edge: 2.0 / edge,
                mid: 0.5 * (low + high),
                amp: 0.5 * (high - low),
            },
            Pattern::Stripes { period, low, high, edge } => Compiled::Stripes {
                period,
                inv_period: 1.0 / period,
                inv_half_edge: 2.0 / edge,
                mid: 0.5 * (low + high),
                amp: 0.5 * (high - low),
            },
            Pattern::Blobs { cell, min_half, max_half, background, contrast, edge, seed } => Compiled::Blobs {
                cell,
                inv_cell: 1.0 / cell,
                min_half,
                span: max_half - min_half,
                background,
                contrast,
                inv_edge: 1.0 / edge,
                seed,
            },
        }
    }

    #[inline(always)]
    fn eval(&self, u: f64, v: f64) -> f64 {
        match *self {
            Compiled::Constant(c) => c,
            Compiled::Checker { square, inv_square, inv_half_edge, mid, amp } => {
                mid + amp
                    * soft_parity(u, square, inv_square, inv_half_edge)
                    * soft_parity(v, square, inv_square, inv_half_edge)
            }
            Compiled::Stripes { period, inv_period, inv_half_edge, mid, amp } => {
                mid + amp * soft_parity(u, period, inv_period, inv_half_edge)
            }
            Compiled::Blobs { inv_cell, .. } => {
                let (i, j) = (fast_floor(u * inv_cell), fast_floor(v * inv_cell));
                self.blob(i, j).eval(u, v)
            }
        }
    }

    /// Parameters of the blob in cell `(i, j)`; only meaningful for `Blobs`.
    #[inline]
    fn blob(&self, i: f64, j: f64) -> Blob {
        let Compiled::Blobs { cell, min_half, span, background, contrast, inv_edge, seed, .. } = *self else {
            return Blob::default();
        };
        let h = splitmix(seed ^ (i as i64 as u64).wrapping_mul(0x9E37_79B9) ^ (j as i64 as u64).rotate_left(32));
        let half = min_half + span * unit16(h, 2);
        let slack = (0.5 * cell - half * std::f64::consts::SQRT_2).max(0.0);
        let (cs, sn) = rotation_table()[((h >> 48) & ((1 << ROTATION_TABLE_BITS) - 1)) as usize];
        Blob {
            i,
            j,
            cx: (i + 0.5) * cell + slack * (2.0 * unit16(h, 0) - 1.0),
            cy: (j + 0.5) * cell + slack * (2.0 * unit16(h, 1) - 1.0),
            cs,
            sn,
            half,
            inv_edge,
            background,
            amp: if h >> 63 == 0 { contrast } else { -contrast },
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Blob {
    i: f64,
    j: f64,
    cx: f64,
    cy: f64,
    cs: f64,
    sn: f64,
    half: f64,
    inv_edge: f64,
    background: f64,
    amp: f64,
}

impl Blob {
    #[inline(always)]
    fn eval(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.cx, v - self.cy);
        let (qx, qy) = (self.cs * du + self.sn * dv, -self.sn * du + self.cs * dv);
        let d = qx.abs().max(qy.abs()) - self.half;
        self.background + self.amp * (0.5 - d * self.inv_edge).clamp(0.0, 1.0)
    }
}

impl Pattern {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        Compiled::new(self).eval(u, v)
    }
}

/// Textured rectangle: the plane's local z = 0 face, centered at its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    /// Maps plane coordinates to world.
    pub pose: Pose,
    pub half_extent: (f64, f64),
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub planes: Vec<Plane>,
    /// Log intensity of rays that hit nothing.
    pub background: f64,
}

/// Scene presets available from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Checkerboard,
    Stripes,
    Blobs,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(SceneKind::Checkerboard),
            "stripes" => Ok(SceneKind::Stripes),
            "blobs" => Ok(SceneKind::Blobs),
            other => Err(Error::Config(format!("unknown scene `{other}`"))),
        }
    }
}

impl Scene {
    /// A large textured floor at world z = 0.
    pub fn floor(pattern: Pattern) -> Self {
        Self { planes: vec![Plane { pose: Pose::identity(), half_extent: (30.0, 30.0), pattern }], background: 0.0 }
    }

    pub fn preset(kind: SceneKind, seed: u64) -> Self {
        let pattern = match kind {
            SceneKind::Checkerboard => Pattern::Checkerboard { square: 0.4, low: -0.4, high: 0.4, edge: 0.01 },
            SceneKind::Stripes => Pattern::Stripes { period: 0.3, low: -0.4, high: 0.4, edge: 0.01 },
            SceneKind::Blobs => Pattern::Blobs {
                cell: 0.5,
                min_half: 0.07,
                max_half: 0.14,
                background: 0.0,
                contrast: 0.6,
                edge: 0.01,
                seed,
            },
        };
        Self::floor(pattern)
    }
}

/// Per-plane quantities that turn a ray hit into a few dot products.
struct PlaneRay {
    /// Plane normal in the camera frame.
    n: Vec3,
    /// Plane axes in the camera frame.
    e1: Vec3,
    e2: Vec3,
    /// `n·(c − o)` in world.
    num: f64,
    /// Camera center in plane coordinates.
    u0: f64,
    v0: f64,
    half: (f64, f64),
    pattern: Compiled,
}

struct SceneView {
    planes: Vec<PlaneRay>,
    background: f64,
}

impl SceneView {
    fn new(scene: &Scene, pose: &Pose) -> Self {
        let rt = pose.rotation.inverse();
        let planes = scene
            .planes
            .iter()
            .map(|p| {
                let r = p.pose.rotation.matrix();
                let (e1w, e2w, nw) = (r.column(0).into_owned(), r.column(1).into_owned(), r.column(2).into_owned());
                let rel = pose.translation - p.pose.translation;
                PlaneRay {
                    n: rt.rotate(&nw),
                    e1: rt.rotate(&e1w),
                    e2: rt.rotate(&e2w),
                    num: -nw.dot(&rel),
                    u0: e1w.dot(&rel),
                    v0: e2w.dot(&rel),
                    half: p.half_extent,
                    pattern: Compiled::new(&p.pattern),
                }
            })
            .collect();
        Self { planes, background: scene.background }
    }

    /// Nearest hit along the camera-frame ray `r` (with `r.z = 1`): camera
    /// depth and log intensity.
    #[inline]
    fn cast(&self, r: &Vec3) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for p in &self.planes {
            let den = p.n.dot(r);
            if den.abs() < 1e-12 {
                continue;
            }
            let t = p.num / den;
            if t <= 1e-6 || best.is_some_and(|b| b.0 <= t) {
                continue;
            }
            let u = p.u0 + t * p.e1.dot(r);
            let v = p.v0 + t * p.e2.dot(r);
            if u.abs() > p.half.0 || v.abs() > p.half.1 {
                continue;
            }
            best = Some((t, p.pattern.eval(u, v)));
        }
        best
    }
}

/// Undistorted camera-frame rays (`z = 1`) through pixel centers, optionally
/// with `s × s` sub-pixel rays each.
struct RayTable {
    width: usize,
    height: usize,
    samples: usize,
    rays: Vec<Vec3>,
    /// Ray components for the single-sample path.
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl RayTable {
    fn new(cam: &Camera, supersample: usize) -> Self {
        let s = supersample.max(1);
        let (w, h) = (cam.width as usize, cam.height as usize);
        let mut rays = Vec::with_capacity(w * h * s * s);
        for y in 0..h {
            for x in 0..w {
                // center first so that depth comes from the pixel center
                rays.push(cam.normalized_ray(&crate::geometry::Vec2::new(x as f64, y as f64)));
                if s > 1 {
                    for j in 0..s {
                        for i in 0..s {
                            let ox = (i as f64 + 0.5) / s as f64 - 0.5;
                            let oy = (j as f64 + 0.5) / s as f64 - 0.5;
                            rays.push(cam.normalized_ray(&crate::geometry::Vec2::new(x as f64 + ox, y as f64 + oy)));
                        }
                    }
                }
            }
        }
        let (xs, ys) = if s == 1 { (rays.iter().map(|r| r.x).collect(), rays.iter().map(|r| r.y).collect()) } else { (Vec::new(), Vec::new()) };
        Self { width: w, height: h, samples: if s > 1 { s * s + 1 } else { 1 }, rays, xs, ys }
    }

    /// Fills log intensity and depth (0 where nothing is hit) per pixel.
    fn render(&self, view: &SceneView, log: &mut [f64], depth: &mut [f64]) {
        let k = self.samples;
        if k == 1 && view.planes.len() == 1 {
            return self.render_single(&view.planes[0], view.background, log, depth);
        }
        let rows_log = log.par_chunks_mut(self.width);
        let rows_depth = depth.par_chunks_mut(self.width);
        rows_log.zip(rows_depth).enumerate().for_each(|(y, (lrow, drow))| {
            for x in 0..self.width {
                let base = (y * self.width + x) * k;
                let center = view.cast(&self.rays[base]);
                drow[x] = center.map_or(0.0, |c| c.0);
                lrow[x] = if k == 1 {
                    center.map_or(view.background, |c| c.1)
                } else {
                    let sum: f64 = self.rays[base + 1..base + k].iter().map(|r| view.cast(r).map_or(view.background, |c| c.1)).sum();
                    sum / (k - 1) as f64
                };
            }
        });
    }

    /// Same as the general path for one plane and one ray per pixel, with the
    /// ray–plane algebra unrolled and the pattern dispatch hoisted.
    fn render_single(&self, p: &PlaneRay, background: f64, log: &mut [f64], depth: &mut [f64]) {
        match p.pattern {
            Compiled::Constant(c) => self.render_plane(p, background, log, depth, || move |_, _| c),
            Compiled::Checker { .. } | Compiled::Stripes { .. } => {
                self.render_plane(p, background, log, depth, || |u, v| p.pattern.eval(u, v))
            }
            Compiled::Blobs { inv_cell, .. } => self.render_plane(p, background, log, depth, || {
                // neighbouring pixels mostly share a cell
                let mut cached = p.pattern.blob(f64::NAN, f64::NAN);
                move |u: f64, v: f64| {
                    let (i, j) = (fast_floor(u * inv_cell), fast_floor(v * inv_cell));
                    if i != cached.i || j != cached.j {
                        cached = p.pattern.blob(i, j);
                    }
                    cached.eval(u, v)
                }
            }),
        }
    }

    #[inline(always)]
    fn render_plane<M, F>(&self, p: &PlaneRay, background: f64, log: &mut [f64], depth: &mut [f64], make_eval: M)
    where
        M: Fn() -> F + Sync,
        F: FnMut(f64, f64) -> f64,
    {
        let (n, e1, e2) = (p.n, p.e1, p.e2);
        let (num, u0, v0, (hu, hv)) = (p.num, p.u0, p.v0, p.half);
        let w = self.width;
        let rows = 16;
        log.par_chunks_mut(w * rows).zip(depth.par_chunks_mut(w * rows)).enumerate().for_each(|(c, (lrows, drows))| {
            let off = c * w * rows;
            let mut eval = make_eval();
            let rays = self.xs[off..off + lrows.len()].iter().zip(&self.ys[off..off + lrows.len()]);
            for ((l, d), (&rx, &ry)) in lrows.iter_mut().zip(drows.iter_mut()).zip(rays) {
                let den = n.x * rx + n.y * ry + n.z;
                let t = num / den;
                let u = u0 + t * (e1.x * rx + e1.y * ry + e1.z);
                let v = v0 + t * (e2.x * rx + e2.y * ry + e2.z);
                let hit = den.abs() >= 1e-12 && t > 1e-6 && u.abs() <= hu && v.abs() <= hv;
                *d = if hit { t } else { 0.0 };
                *l = if hit { eval(u, v) } else { background };
            }
        });
    }
}

/// Log-intensity image seen from `pose`, averaged over `supersample²` rays per
/// pixel when `supersample > 1`.
pub fn render_log_intensity(scene: &Scene, pose: &Pose, cam: &Camera, supersample: usize) -> GrayImage {
    let (img, _) = render_with_depth(scene, pose, cam, supersample);
    img
}

/// Log intensity and camera depth (m, 0 where nothing is hit).
pub fn render_with_depth(scene: &Scene, pose: &Pose, cam: &Camera, supersample: usize) -> (GrayImage, DepthMap) {
    let table = RayTable::new(cam, supersample);
    let n = table.width * table.height;
    let (mut log, mut depth) = (vec![0.0; n], vec![0.0; n]);
    table.render(&SceneView::new(scene, pose), &mut log, &mut depth);
    let img = GrayImage::from_vec(table.width, table.height, log.iter().map(|&v| v as f32).collect()).expect("camera dims");
    let map = DepthMap::new(table.width, table.height, depth.iter().map(|&v| v as f32).collect()).expect("camera dims");
    (img, map)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrajectoryKind {
    Static,
    /// Constant velocity (m/s, world).
    Line { velocity: Vec3 },
    /// Horizontal circle starting at the base pose, fixed orientation.
    Circle { radius: f64, rev_per_sec: f64 },
    /// Horizontal square with circular corners, constant speed, fixed orientation.
    Square { side: f64, corner_radius: f64, speed: f64 },
    /// Rotation about the optical axis (rad/s).
    YawSpin { rate: f64 },
    /// Smooth Lissajous translation with a gentle orientation wobble.
    Spline { amplitude: f64, frequency: f64 },
}

/// Analytic camera motion; poses map camera to world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub base: Pose,
    /// Seconds.
    pub duration: f64,
    /// Ground-truth sampling rate (Hz).
    pub sample_rate: f64,
}

/// Camera `height` meters above the floor, looking straight down.
pub fn downward_pose(height: f64) -> Pose {
    Pose::new(Rotation::from_axis_angle(&Vec3::x(), std::f64::consts::PI), Vec3::new(0.0, 0.0, height))
}

/// Position, velocity and acceleration along a rounded square path at arc
/// length `s` (origin at the middle of the bottom side, counter-clockwise).
fn rounded_square(side: f64, rc: f64, s: f64) -> (Vec3, Vec3, Vec3) {
    let straight = side - 2.0 * rc;
    let arc = 0.5 * std::f64::consts::PI * rc;
    let seg = straight + arc;
    let total = 4.0 * seg;
    let s = s.rem_euclid(total);
    let k = (s / seg).floor().min(3.0);
    let local = s - k * seg;
    // start of side k, measured from the bottom side mid-point
    let theta0 = k * std::f64::consts::FRAC_PI_2;
    let dir = Vec3::new(theta0.cos(), theta0.sin(), 0.0);
    let inward = Vec3::new(-theta0.sin(), theta0.cos(), 0.0);
    let h = 0.5 * side;
    // bottom side runs along +x at y = −h; rotate that frame by theta0
    let frame = |p: (f64, f64)| dir * p.0 + inward * (p.1);
    let first_half = 0.5 * straight;
    if local < first_half {
        let p = frame((local, -h));
        (p, dir, Vec3::zeros())
    } else if local < first_half + arc {
        let phi = (local - first_half) / rc;
        let c = (first_half, -h + rc);
        let p = frame((c.0 + rc * phi.sin(), c.1 - rc * phi.cos()));
        let v = dir * phi.cos() + inward * phi.sin();
        let a = (dir * (-phi.sin()) + inward * phi.cos()) / rc;
        (p, v, a)
    } else {
        // second half of the next side belongs to side k + 1's frame
        let rest = local - first_half - arc;
        let theta1 = theta0 + std::f64::consts::FRAC_PI_2;
        let d1 = Vec3::new(theta1.cos(), theta1.sin(), 0.0);
        let i1 = Vec3::new(-theta1.sin(), theta1.cos(), 0.0);
        let p = d1 * (-first_half + rest) + i1 * (-h);
        (p, d1, Vec3::zeros())
    }
}

impl Trajectory {
    pub fn new(kind: TrajectoryKind, base: Pose, duration: f64) -> Self {
        Self { kind, base, duration, sample_rate: 200.0 }
    }

    /// Named preset over a downward-looking camera 3 m above the floor.
    pub fn preset(name: &str, duration: f64) -> Result<Self> {
        let kind = match name {
            "static" => TrajectoryKind::Static,
            "line" => TrajectoryKind::Line { velocity: Vec3::new(0.3, 0.1, 0.0) },
            "circle" => TrajectoryKind::Circle { radius: 1.0, rev_per_sec: 0.1 },
            "square" => TrajectoryKind::Square { side: 2.0, corner_radius: 0.3, speed: 0.5 },
            "yaw-spin" => TrajectoryKind::YawSpin { rate: 1.0 },
            "spline" => TrajectoryKind::Spline { amplitude: 0.5, frequency: 0.1 },
            other => return Err(Error::Config(format!("unknown trajectory `{other}`"))),
        };
        Ok(Self::new(kind, downward_pose(3.0), duration))
    }

    /// World-frame position, velocity and acceleration of the camera center.
    pub fn kinematics(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let p0 = self.base.translation;
        match self.kind {
            TrajectoryKind::Static | TrajectoryKind::YawSpin { .. } => (p0, Vec3::zeros(), Vec3::zeros()),
            TrajectoryKind::Line { velocity } => (p0 + velocity * t, velocity, Vec3::zeros()),
            TrajectoryKind::Circle { radius, rev_per_sec } => {
                let w = 2.0 * std::f64::consts::PI * rev_per_sec;
                let (s, c) = (w * t).sin_cos();
                let center = p0 - Vec3::new(radius, 0.0, 0.0);
                (
                    center + Vec3::new(radius * c, radius * s, 0.0),
                    Vec3::new(-radius * w * s, radius * w * c, 0.0),
                    Vec3::new(-radius * w * w * c, -radius * w * w * s, 0.0),
                )
            }
            TrajectoryKind::Square { side, corner_radius, speed } => {
                let (p, v, a) = rounded_square(side, corner_radius, speed * t);
                let (start, _, _) = rounded_square(side, corner_radius, 0.0);
                (p0 + p - start, v * speed, a * speed * speed)
            }
            TrajectoryKind::Spline { amplitude, frequency } => {
                let w = 2.0 * std::f64::consts::PI * frequency;
                let f = [(w, 0.0), (1.5 * w, 0.7), (0.5 * w, 1.3)];
                let amp = [amplitude, amplitude, 0.3 * amplitude];
                let mut p = p0;
                let mut v = Vec3::zeros();
                let mut a = Vec3::zeros();
                for k in 0..3 {
                    let (wk, ph) = f[k];
                    // offset so that the path starts at the base position
                    p[k] += amp[k] * ((wk * t + ph).sin() - ph.sin());
                    v[k] = amp[k] * wk * (wk * t + ph).cos();
                    a[k] = -amp[k] * wk * wk * (wk * t + ph).sin();
                }
                (p, v, a)
            }
        }
    }

    /// Camera orientation and body-frame angular velocity.
    pub fn attitude(&self, t: f64) -> (Rotation, Vec3) {
        match self.kind {
            TrajectoryKind::YawSpin { rate } => {
                (self.base.rotation * Rotation::from_axis_angle(&Vec3::z(), rate * t), Vec3::new(0.0, 0.0, rate))
            }
            TrajectoryKind::Spline { frequency, .. } => {
                // small body-frame wobble: R(t) = R0 · exp(φ(t)) with φ along a fixed axis
                let w = 2.0 * std::f64::consts::PI * frequency;
                let axis = Vec3::new(0.6, 0.8, 0.0);
                let amp = 0.05;
                let ang = amp * (w * t).sin();
                (self.base.rotation * Rotation::exp(&(axis * ang)), axis * (amp * w * (w * t).cos()))
            }
            _ => (self.base.rotation, Vec3::zeros()),
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        let (p, _, _) = self.kinematics(t);
        Pose::new(self.attitude(t).0, p)
    }

    pub fn pose_at_ns(&self, t: Nanos) -> Pose {
        self.pose(t as f64 / NANOS_PER_SEC as f64)
    }

    /// Ground-truth samples at `sample_rate` over `[0, duration]`.
    pub fn sample_times(&self) -> Vec<Nanos> {
        let n = (self.duration * self.sample_rate).floor() as i64;
        (0..=n).map(|k| (k as f64 * NANOS_PER_SEC as f64 / self.sample_rate).round() as Nanos).collect()
    }

    pub fn groundtruth(&self) -> TrajectoryFile {
        TrajectoryFile { samples: self.sample_times().into_iter().map(|t| (t, self.pose_at_ns(t))).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventGenConfig {
    /// Log-intensity change per event.
    pub contrast: f64,
    pub refractory_ns: Nanos,
    /// Spurious events per pixel per second.
    pub noise_rate: f64,
    pub seed: u64,
    /// Intensity sampling rate (Hz); crossings are interpolated in between.
    pub sample_rate: f64,
    pub supersample: usize,
}

impl Default for EventGenConfig {
    fn default() -> Self {
        Self { contrast: 0.2, refractory_ns: 100_000, noise_rate: 0.0, seed: 0, sample_rate: 1000.0, supersample: 1 }
    }
}

/// Per-pixel threshold-crossing state of the linear event model.
pub struct EventGenerator {
    width: usize,
    contrast: f64,
    refractory_ns: Nanos,
    reference: Vec<f64>,
    last_log: Vec<f64>,
    last_depth: Vec<f64>,
    last_event: Vec<Nanos>,
    last_t: Nanos,
}

impl EventGenerator {
    pub fn new(width: usize, contrast: f64, refractory_ns: Nanos, t0: Nanos, log: &[f64], depth: &[f64]) -> Self {
        Self {
            width,
            contrast,
            refractory_ns,
            reference: log.to_vec(),
            last_log: log.to_vec(),
            last_depth: depth.to_vec(),
            last_event: vec![Nanos::MIN / 2; log.len()],
            last_t: t0,
        }
    }

    /// Advances every pixel to time `t`, appending events with their
    /// interpolated depths. Events of one step are ordered by (t, y, x).
    pub fn step(&mut self, t: Nanos, log: &[f64], depth: &[f64], out: &mut Vec<Event>, depths: &mut Vec<f32>) {
        let t_prev = self.last_t;
        let dt = (t - t_prev) as f64;
        let width = self.width;
        let (c, refr) = (self.contrast, self.refractory_ns);
        let start = out.len();
        let mut found: Vec<(Nanos, u32, Polarity, f32)> = self
            .reference
            .par_chunks_mut(width)
            .zip(self.last_log.par_chunks_mut(width))
            .zip(self.last_depth.par_chunks_mut(width))
            .zip(self.last_event.par_chunks_mut(width))
            .enumerate()
            .flat_map_iter(|(y, (((refr_row, prev_row), depth_row), last_row))| {
                let mut row_events = Vec::new();
                for x in 0..width {
                    let i = y * width + x;
                    let (l0, l1) = (prev_row[x], log[i]);
                    let (d0, d1) = (depth_row[x], depth[i]);
                    if (l1 - refr_row[x]).abs() < c {
                        prev_row[x] = l1;
                        depth_row[x] = d1;
                        continue;
                    }
                    let delta = l1 - l0;
                    loop {
                        let r = refr_row[x];
                        let (target, pol) = if l1 - r >= c {
                            (r + c, Polarity::Positive)
                        } else if r - l1 >= c {
                            (r - c, Polarity::Negative)
                        } else {
                            break;
                        };
                        refr_row[x] = target;
                        let frac = if delta != 0.0 { ((target - l0) / delta).clamp(0.0, 1.0) } else { 1.0 };
                        let te = t_prev + (frac * dt).round() as Nanos;
                        if te - last_row[x] >= refr {
                            last_row[x] = te;
                            let d = if d0 > 0.0 && d1 > 0.0 { d0 + frac * (d1 - d0) } else { d1.max(d0) };
                            row_events.push((te, (y * width + x) as u32, pol, d as f32));
                        }
                    }
                    prev_row[x] = l1;
                    depth_row[x] = d1;
                }
                row_events
            })
            .collect();
        found.sort_by_key(|e| (e.0, e.1));
        out.reserve(found.len());
        for (te, idx, pol, d) in found {
            out.push(Event::new(te, (idx as usize % width) as u16, (idx as usize / width) as u16, pol));
            depths.push(d);
        }
        debug_assert!(out[start..].windows(2).all(|w| w[0].t <= w[1].t));
        self.last_t = t;
    }
}

/// Simulated event stream with the ground-truth depth of each event.
#[derive(Clone, Debug, Default)]
pub struct SimEvents {
    pub events: Vec<Event>,
    pub depths: Vec<f32>,
}

/// Runs the linear event model along the trajectory.
pub fn generate_events(scene: &Scene, traj: &Trajectory, cam: &Camera, cfg: &EventGenConfig) -> Result<SimEvents> {
    if !(traj.duration > 0.0) {
        return Err(Error::InvalidArgument(format!("trajectory duration must be positive, got {}", traj.duration)));
    }
    if !(cfg.contrast > 0.0) || !(cfg.sample_rate > 0.0) {
        return Err(Error::InvalidArgument("contrast and sample rate must be positive".into()));
    }
    let table = RayTable::new(cam, cfg.supersample);
    let n = table.width * table.height;
    let (mut log, mut depth) = (vec![0.0; n], vec![0.0; n]);
    table.render(&SceneView::new(scene, &traj.pose(0.0)), &mut log, &mut depth);
    let mut gen = EventGenerator::new(table.width, cfg.contrast, cfg.refractory_ns, 0, &log, &depth);
    let steps = (traj.duration * cfg.sample_rate).round() as i64;
    let mut out = SimEvents::default();
    for k in 1..=steps {
        let t = (k as f64 * NANOS_PER_SEC as f64 / cfg.sample_rate).round() as Nanos;
        let pose = traj.pose_at_ns(t);
        table.render(&SceneView::new(scene, &pose), &mut log, &mut depth);
        gen.step(t, &log, &depth, &mut out.events, &mut out.depths);
    }
    // crossings exactly on a sample boundary can belong to either step
    let key = |e: &Event| (e.t, e.y, e.x);
    if !out.events.windows(2).all(|w| key(&w[0]) <= key(&w[1])) {
        let mut order: Vec<usize> = (0..out.events.len()).collect();
        order.sort_by_key(|&i| key(&out.events[i]));
        out = SimEvents {
            events: order.iter().map(|&i| out.events[i]).collect(),
            depths: order.iter().map(|&i| out.depths[i]).collect(),
        };
    }
    if cfg.noise_rate > 0.0 {
        add_noise(&mut out, scene, traj, cam, cfg)?;
    }
    Ok(out)
}

fn add_noise(out: &mut SimEvents, scene: &Scene, traj: &Trajectory, cam: &Camera, cfg: &EventGenConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cam.width as usize, cam.height as usize);
    let lambda = cfg.noise_rate * traj.duration * (w * h) as f64;
    let count = Poisson::new(lambda).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(&mut rng) as usize;
    let end = (traj.duration * NANOS_PER_SEC as f64) as Nanos;
    let mut noise: Vec<(Event, f32)> = (0..count)
        .map(|_| {
            let t = rng.random_range(0..=end);
            let x = rng.random_range(0..w) as u16;
            let y = rng.random_range(0..h) as u16;
            let p = if rng.random::<bool>() { Polarity::Positive } else { Polarity::Negative };
            let view = SceneView::new(scene, &traj.pose_at_ns(t));
            let d = view.cast(&cam.normalized_ray(&crate::geometry::Vec2::new(x as f64, y as f64))).map_or(0.0, |c| c.0);
            (Event::new(t, x, y, p), d as f32)
        })
        .collect();
    noise.sort_by_key(|(e, _)| (e.t, e.y, e.x));
    // stable merge keeps model events ahead of noise at equal keys
    let model: Vec<(Event, f32)> = out.events.drain(..).zip(out.depths.drain(..)).collect();
    let mut merged = Vec::with_capacity(model.len() + noise.len());
    let (mut i, mut j) = (0, 0);
    while i < model.len() || j < noise.len() {
        let take_model = j >= noise.len() || (i < model.len() && (model[i].0.t, model[i].0.y, model[i].0.x) <= (noise[j].0.t, noise[j].0.y, noise[j].0.x));
        if take_model {
            merged.push(model[i]);
            i += 1;
        } else {
            merged.push(noise[j]);
            j += 1;
        }
    }
    for (e, d) in merged {
        out.events.push(e);
        out.depths.push(d);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoise {
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub seed: u64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self { accel_sigma: 0.0, gyro_sigma: 0.0, seed: 0 }
    }
}

/// Body-frame gyro and specific force (`Rᵀ(a − g)`) at `rate` Hz.
pub fn generate_imu(traj: &Trajectory, rate: f64, noise: &ImuNoise) -> Result<Vec<ImuSample>> {
    if !(rate > 0.0) {
        return Err(Error::InvalidArgument(format!("IMU rate must be positive, got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let na = Normal::new(0.0, noise.accel_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let ng = Normal::new(0.0, noise.gyro_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = (traj.duration * rate).floor() as i64;
    let mut out = Vec::with_capacity(n as usize + 1);
    for k in 0..=n {
        let t = (k as f64 * NANOS_PER_SEC as f64 / rate).round() as Nanos;
        let ts = t as f64 / NANOS_PER_SEC as f64;
        let (_, _, a) = traj.kinematics(ts);
        let (r, w) = traj.attitude(ts);
        let mut accel = r.inverse().rotate(&(a - GRAVITY));
        let mut gyro = w;
        if noise.accel_sigma > 0.0 {
            accel += Vec3::new(na.sample(&mut rng), na.sample(&mut rng), na.sample(&mut rng));
        }
        if noise.gyro_sigma > 0.0 {
            gyro += Vec3::new(ng.sample(&mut rng), ng.sample(&mut rng), ng.sample(&mut rng));
        }
        out.push(ImuSample { t, accel, gyro });
    }
    Ok(out)
}

/// Renders depth straight from the scene, optionally scaled and with
/// multiplicative Gaussian noise (deterministic per timestamp).
#[derive(Clone)]
pub struct GroundTruthDepth {
    pub scene: Arc<Scene>,
    pub trajectory: Trajectory,
    pub camera: Camera,
    pub scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GroundTruthDepth {
    pub fn new(scene: Arc<Scene>, trajectory: Trajectory, camera: Camera) -> Self {
        Self { scene, trajectory, camera, scale: 1.0, noise_sigma: 0.0, seed: 0 }
    }

    pub fn depth_map(&self, t: Nanos) -> DepthMap {
        let (_, mut map) = render_with_depth(&self.scene, &self.trajectory.pose_at_ns(t), &self.camera, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ t as u64);
        let normal = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        let data: Vec<f32> = map
            .data()
            .iter()
            .map(|&d| {
                let n = if self.noise_sigma > 0.0 { 1.0 + normal.sample(&mut rng) } else { 1.0 };
                (d as f64 * self.scale * n) as f32
            })
            .collect();
        map = DepthMap::new(map.width(), map.height(), data).expect("same dims");
        map
    }
}

impl DepthSource for GroundTruthDepth {
    fn observe(&self, t: Nanos) -> Result<DepthObservation> {
        Ok(DepthObservation::Map(self.depth_map(t)))
    }
}

/// Everything `export_dataset` writes.
#[derive(Clone, Debug)]
pub struct SimDataset {
    pub camera: Camera,
    pub events: SimEvents,
    pub imu: Vec<ImuSample>,
    pub groundtruth: TrajectoryFile,
    pub depth_frames: Vec<(Nanos, DepthMap)>,
}

/// Options of a complete simulation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSpec {
    pub scene: SceneKind,
    pub trajectory: String,
    pub duration: f64,
    pub events: EventGenConfig,
    pub imu_rate: f64,
    pub imu_noise: ImuNoise,
    /// Depth frames per second written to `depth/` (0 disables).
    pub depth_rate: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            scene: SceneKind::Blobs,
            trajectory: "circle".into(),
            duration: 10.0,
            events: EventGenConfig::default(),
            imu_rate: 1000.0,
            imu_noise: ImuNoise::default(),
            depth_rate: 10.0,
        }
    }
}

pub fn simulate(spec: &SimSpec, cam: &Camera) -> Result<(Scene, Trajectory, SimDataset)> {
    let scene = Scene::preset(spec.scene, spec.events.seed);
    let traj = Trajectory::preset(&spec.trajectory, spec.duration)?;
    let data = simulate_with(&scene, &traj, cam, spec)?;
    Ok((scene, traj, data))
}

pub fn simulate_with(scene: &Scene, traj: &Trajectory, cam: &Camera, spec: &SimSpec) -> Result<SimDataset> {
    let events = generate_events(scene, traj, cam, &spec.events)?;
    let imu = generate_imu(traj, spec.imu_rate, &spec.imu_noise)?;
    let mut depth_frames = Vec::new();
    if spec.depth_rate > 0.0 {
        let n = (traj.duration * spec.depth_rate).floor() as i64;
        for k in 0..=n {
            let t = (k as f64 * NANOS_PER_SEC as f64 / spec.depth_rate).round() as Nanos;
            depth_frames.push((t, render_with_depth(scene, &traj.pose_at_ns(t), cam, 1).1));
        }
    }
    Ok(SimDataset { camera: *cam, events, imu, groundtruth: traj.groundtruth(), depth_frames })
}

pub const EVENTS_FILE: &str = "events.txt";
pub const IMU_FILE: &str = "imu.txt";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const CALIB_FILE: &str = "calib.txt";
pub const DEPTH_DIR: &str = "depth";

/// Writes `events.txt`, `imu.txt`, `groundtruth.txt`, `calib.txt` and `depth/`.
pub fn export_dataset(dir: impl AsRef<Path>, data: &SimDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map(BufWriter::new).map_err(|e| Error::io(&p, e))
    };
    let flush = |name: &str, r: std::io::Result<()>| r.map_err(|e| Error::io(dir.join(name), e));
    let mut w = create(EVENTS_FILE)?;
    flush(EVENTS_FILE, write_events(&mut w, &data.events.events).and_then(|_| w.flush()))?;
    let mut w = create(IMU_FILE)?;
    flush(IMU_FILE, write_imu(&mut w, &data.imu).and_then(|_| w.flush()))?;
    let mut w = create(GROUNDTRUTH_FILE)?;
    flush(GROUNDTRUTH_FILE, write_trajectory(&mut w, &data.groundtruth).and_then(|_| w.flush()))?;
    let mut w = create(CALIB_FILE)?;
    flush(CALIB_FILE, write_calib(&mut w, &data.camera).and_then(|_| w.flush()))?;
    if !data.depth_frames.is_empty() {
        write_depth_frames(dir.join(DEPTH_DIR), &data.depth_frames)?;
    }
    Ok(())
}

/// `calib.txt`: the sensor size as a comment line, then the intrinsics line.
pub fn write_calib<W: Write>(mut w: W, cam: &Camera) -> std::io::Result<()> {
    writeln!(w, "# sensor {} {}", cam.width, cam.height)?;
    writeln!(w, "{}", cam.to_calib_line())
}
