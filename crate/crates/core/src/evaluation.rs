//! Trajectory files, timestamp association, Umeyama alignment and absolute
//! position error statistics.

use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::event_stream::{format_seconds, parse_seconds, Nanos};
use crate::geometry::{interpolate_pose, Pose, Rotation, Vec3};

/// Timestamped poses, strictly increasing in time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryFile {
    pub samples: Vec<(Nanos, Pose)>,
}

impl TrajectoryFile {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parses `t_sec px py pz qx qy qz qw` lines.
pub fn read_trajectory<R: BufRead>(reader: R) -> Result<TrajectoryFile> {
    let mut samples: Vec<(Nanos, Pose)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(Error::parse(i + 1, "expected `t_sec px py pz qx qy qz qw`"));
        }
        let t = parse_seconds(f[0]).ok_or_else(|| Error::parse(i + 1, format!("bad timestamp `{}`", f[0])))?;
        let mut v = [0.0f64; 7];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|_| Error::parse(i + 1, format!("bad number `{s}`")))?;
        }
        let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
        if !(qn > 0.5 && qn < 1.5) || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(i + 1, "quaternion is not close to unit norm"));
        }
        if samples.last().is_some_and(|s| s.0 >= t) {
            return Err(Error::NonMonotonicTimestamp { line: i + 1 });
        }
        let rotation = Rotation::from_wxyz(v[6], v[3], v[4], v[5]);
        samples.push((t, Pose::new(rotation, Vec3::new(v[0], v[1], v[2]))));
    }
    Ok(TrajectoryFile { samples })
}

pub fn write_trajectory<W: Write>(mut w: W, traj: &TrajectoryFile) -> std::io::Result<()> {
    for (t, p) in &traj.samples {
        let [qw, qx, qy, qz] = p.rotation.wxyz();
        let tr = &p.translation;
        writeln!(w, "{} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}", format_seconds(*t), tr.x, tr.y, tr.z, qx, qy, qz, qw)?;
    }
    Ok(())
}

/// Default association window (ns).
pub const DEFAULT_MAX_DT: Nanos = 10_000_000;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    /// `(t, estimate, ground truth interpolated at t)`.
    pub pairs: Vec<(Nanos, Pose, Pose)>,
    /// Estimates without ground truth within the window.
    pub dropped: usize,
}

/// Pairs every estimate with ground truth interpolated at its timestamp,
/// provided the nearest ground-truth sample lies within `max_dt`.
pub fn associate(est: &TrajectoryFile, gt: &TrajectoryFile, max_dt: Nanos) -> Result<Association> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::NoOverlap);
    }
    let g = &gt.samples;
    let mut out = Association::default();
    for (t, pose) in &est.samples {
        let i = g.partition_point(|s| s.0 < *t);
        let nearest = [i.checked_sub(1), (i < g.len()).then_some(i)]
            .into_iter()
            .flatten()
            .map(|k| (g[k].0 - t).abs())
            .min()
            .expect("non-empty ground truth");
        if nearest > max_dt {
            out.dropped += 1;
            continue;
        }
        let gt_pose = if i < g.len() && g[i].0 == *t {
            g[i].1
        } else if i == 0 {
            g[0].1
        } else if i == g.len() {
            g[g.len() - 1].1
        } else {
            let (a, b) = (&g[i - 1], &g[i]);
            let alpha = (t - a.0) as f64 / (b.0 - a.0) as f64;
            let rot = interpolate_pose(&Pose::from_rotation(a.1.rotation), &Pose::from_rotation(b.1.rotation), alpha)?.rotation;
            Pose::new(rot, a.1.translation + (b.1.translation - a.1.translation) * alpha)
        };
        out.pairs.push((*t, *pose, gt_pose));
    }
    if out.pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    Se3,
    Sim3,
    None,
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se3" => Ok(AlignMode::Se3),
            "sim3" => Ok(AlignMode::Sim3),
            "none" => Ok(AlignMode::None),
            other => Err(Error::Config(format!("unknown alignment `{other}`"))),
        }
    }
}

impl std::fmt::Display for AlignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignMode::Se3 => "se3",
            AlignMode::Sim3 => "sim3",
            AlignMode::None => "none",
        })
    }
}

/// `p ↦ s·R·p + t`, applied to estimated positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub scale: f64,
    /// Mode actually used after any fallback.
    pub mode: AlignMode,
}

impl Alignment {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros(), scale: 1.0, mode: AlignMode::None }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

/// Closed-form least-squares alignment of `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<Alignment> {
    let n = src.len();
    if n == 0 || n != dst.len() {
        return Err(Error::InvalidArgument(format!("{} source vs {} target points", n, dst.len())));
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vec3>() / nf;
    let mu_d = dst.iter().sum::<Vec3>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    if var_s < 1e-18 {
        return Err(Error::DegenerateGeometry("all source points coincide".into()));
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Alignment { rotation, translation, scale, mode: if with_scale { AlignMode::Sim3 } else { AlignMode::Se3 } })
}

fn collinear(points: &[Vec3]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let mu = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let c = p - mu;
        cov += c * c.transpose();
    }
    let ev = cov.symmetric_eigenvalues();
    let mut e = [ev[0], ev[1], ev[2]];
    e.sort_by(|a, b| b.total_cmp(a));
    e[1] <= 1e-12 * e[0].max(1e-300)
}

/// Alignment of estimated onto ground-truth positions.
///
/// Similarity alignment on collinear data falls back to a rigid one; data
/// whose estimated positions coincide fall back to a pure translation.
pub fn align(pairs: &[(Nanos, Pose, Pose)], mode: AlignMode) -> Result<Alignment> {
    if pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    let src: Vec<Vec3> = pairs.iter().map(|p| p.1.translation).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|p| p.2.translation).collect();
    let translation_only = || {
        let n = src.len() as f64;
        let offset = (dst.iter().sum::<Vec3>() - src.iter().sum::<Vec3>()) / n;
        Alignment { translation: offset, mode: AlignMode::Se3, ..Alignment::identity() }
    };
    match mode {
        AlignMode::None => Ok(Alignment::identity()),
        AlignMode::Se3 | AlignMode::Sim3 => {
            let want_scale = mode == AlignMode::Sim3;
            let with_scale = if want_scale && collinear(&src) {
                log::warn!("collinear trajectory: similarity alignment falls back to se3");
                false
            } else {
                want_scale
            };
            match umeyama(&src, &dst, with_scale) {
                Ok(a) => Ok(a),
                Err(Error::DegenerateGeometry(why)) => {
                    log::warn!("{why}: alignment falls back to translation only");
                    Ok(translation_only())
                }
                Err(e) => Err(e),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApeStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    /// `(t, residual)` per pair.
    pub residuals: Vec<(Nanos, f64)>,
}

/// Statistics of position residuals.
pub fn ape_from_residuals(residuals: Vec<(Nanos, f64)>) -> Result<ApeStats> {
    if residuals.is_empty() {
        return Err(Error::NoOverlap);
    }
    let n = residuals.len() as f64;
    let mut sorted: Vec<f64> = residuals.iter().map(|r| r.1).collect();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    Ok(ApeStats {
        rmse: (sorted.iter().map(|r| r * r).sum::<f64>() / n).sqrt(),
        mean: sorted.iter().sum::<f64>() / n,
        median,
        max: sorted[sorted.len() - 1],
        min: sorted[0],
        residuals,
    })
}

/// `‖A(p_est) − p_gt‖` statistics over associated pairs.
pub fn ape_stats(pairs: &[(Nanos, Pose, Pose)], alignment: &Alignment) -> Result<ApeStats> {
    ape_from_residuals(pairs.iter().map(|(t, e, g)| (*t, (alignment.apply(&e.translation) - g.translation).norm())).collect())
}

/// Association, alignment and statistics in one step.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub association: Association,
    pub alignment: Alignment,
    pub stats: ApeStats,
}

pub fn evaluate(est: &TrajectoryFile, gt: &TrajectoryFile, max_dt: Nanos, mode: AlignMode) -> Result<EvalReport> {
    let association = associate(est, gt, max_dt)?;
    let alignment = align(&association.pairs, mode)?;
    let stats = ape_stats(&association.pairs, &alignment)?;
    Ok(EvalReport { association, alignment, stats })
}

pub const EVAL_CSV_HEADER: &str = "t_sec,est_x,est_y,est_z,gt_x,gt_y,gt_z,ape";

/// Aligned per-axis positions and the residual series.
pub fn write_eval_csv<W: Write>(mut w: W, report: &EvalReport) -> std::io::Result<()> {
    writeln!(w, "{EVAL_CSV_HEADER}")?;
    for ((t, e, g), (_, r)) in report.association.pairs.iter().zip(&report.stats.residuals) {
        let a = report.alignment.apply(&e.translation);
        let gt = g.translation;
        writeln!(w, "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", format_seconds(*t), a.x, a.y, a.z, gt.x, gt.y, gt.z, r)?;
    }
    Ok(())
}
