//! Pose estimation: two-view triangulation, RANSAC over minimal Gauss–Newton
//! fits, and SE(3) refinement with an optional inverse-depth prior.
//!
//! Poses map camera to world. Updates are left-multiplicative:
//! `T ← exp(δ)·T` with `δ = (ρ, φ)`.

use std::collections::BTreeMap;

use nalgebra::{Matrix2x6, Matrix6, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth_prior::DepthResidualTerm;
use crate::error::{Error, Result};
use crate::event_stream::Nanos;
use crate::geometry::{hat, se3_exp, Camera, Pose, Twist, Vec2, Vec3, MIN_PROJECT_Z};

mod odometry;

pub use odometry::{packet_stream, run_odometry, FrameOutput, Odometry, OdometryOutput, StageTimings, TrackingGap};

/// Below this baseline (m) two views cannot triangulate.
pub const MIN_BASELINE: f64 = 1e-4;
/// Below this ray angle (deg) two views cannot triangulate.
pub const MIN_RAY_ANGLE_DEG: f64 = 0.1;

const REFINE_MAX_ITERS: usize = 50;
const REFINE_STEP_TOL: f64 = 1e-10;
const LM_LAMBDA: f64 = 1e-4;
/// Damping escalations tried before a refinement gives up on a step.
const LM_MAX_RETRIES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub id: u64,
    /// World position (m).
    pub position: Vec3,
    /// Inverse depth in the anchor frame (1/m).
    pub inverse_depth: f64,
    pub anchor_frame: u64,
    pub observations: BTreeMap<u64, Vec2>,
    /// Set once the position comes from two-view triangulation.
    pub triangulated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameState {
    /// Camera to world.
    pub pose: Pose,
    pub timestamp: Nanos,
    pub is_keyframe: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub max_iters: usize,
    /// Reprojection inlier threshold (px).
    pub threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { max_iters: 100, threshold: 2.0, min_inliers: 8, seed: 42 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("ransac.threshold must be positive, got {}", self.threshold)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("ransac.max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// A world point and where it was observed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub point: Vec3,
    pub pixel: Vec2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulation {
    pub point: Vec3,
    /// Larger of the two reprojection errors (px).
    pub reprojection_error: f64,
}

/// Midpoint of the common perpendicular of the two viewing rays.
pub fn triangulate(obs_a: &Vec2, obs_b: &Vec2, pose_a: &Pose, pose_b: &Pose, cam: &Camera) -> Result<Triangulation> {
    let (ca, cb) = (pose_a.translation, pose_b.translation);
    let baseline = (cb - ca).norm();
    if baseline < MIN_BASELINE {
        return Err(Error::DegenerateBaseline { baseline });
    }
    let da = pose_a.rotation.rotate(&cam.normalized_ray(obs_a)).normalize();
    let db = pose_b.rotation.rotate(&cam.normalized_ray(obs_b)).normalize();
    let angle_deg = da.cross(&db).norm().atan2(da.dot(&db)).to_degrees();
    if angle_deg < MIN_RAY_ANGLE_DEG {
        return Err(Error::ParallelRays { angle_deg });
    }
    // minimize |ca + s·da − cb − t·db|²
    let w = ca - cb;
    let b = da.dot(&db);
    let (d, e) = (da.dot(&w), db.dot(&w));
    let den = 1.0 - b * b;
    let s = (b * e - d) / den;
    let t = (e - b * d) / den;
    let point = 0.5 * ((ca + da * s) + (cb + db * t));
    let err = |pose: &Pose, obs: &Vec2| {
        cam.project(&pose.inverse_transform_point(&point)).map_or(f64::INFINITY, |p| (p - obs).norm())
    };
    Ok(Triangulation { point, reprojection_error: err(pose_a, obs_a).max(err(pose_b, obs_b)) })
}

/// `π(T⁻¹X) − u`.
pub fn reprojection_residual(pose: &Pose, c: &Correspondence, cam: &Camera) -> Result<Vec2> {
    Ok(cam.project(&pose.inverse_transform_point(&c.point))? - c.pixel)
}

/// Residual and its Jacobian with respect to a left twist `δ = (ρ, φ)`.
///
/// With `Xc = Rᵀ(X − t)`: `∂Xc/∂ρ = −Rᵀ`, `∂Xc/∂φ = Rᵀ[X]×`.
pub fn reprojection_jacobian(pose: &Pose, c: &Correspondence, cam: &Camera) -> Result<(Vec2, Matrix2x6<f64>)> {
    let (xc, dxc) = camera_point_jacobian(pose, &c.point);
    let (px, jp) = cam.project_with_jacobian(&xc)?;
    let mut j = Matrix2x6::zeros();
    j.copy_from(&(jp * dxc));
    Ok((px - c.pixel, j))
}

/// Camera-frame point and `∂Xc/∂δ` (3×6).
fn camera_point_jacobian(pose: &Pose, x: &Vec3) -> (Vec3, nalgebra::Matrix3x6<f64>) {
    let rt = pose.rotation.matrix().transpose();
    let xc = rt * (x - pose.translation);
    let mut d = nalgebra::Matrix3x6::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt));
    d.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rt * hat(x)));
    (xc, d)
}

/// Mean inverse camera depth of the points and its gradient.
fn mean_inverse_depth(pose: &Pose, corr: &[Correspondence]) -> Option<(f64, Vector6<f64>)> {
    let mut sum = 0.0;
    let mut grad = Vector6::zeros();
    let mut n = 0usize;
    for c in corr {
        let (xc, d) = camera_point_jacobian(pose, &c.point);
        if xc.z <= MIN_PROJECT_Z {
            continue;
        }
        let iz = 1.0 / xc.z;
        sum += iz;
        grad -= d.row(2).transpose() * (iz * iz);
        n += 1;
    }
    (n > 0).then(|| (sum / n as f64, grad / n as f64))
}

fn depth_weight(term: Option<&DepthResidualTerm>) -> f64 {
    match term {
        Some(t) if t.sigma.is_finite() && t.sigma > 0.0 => 1.0 / t.sigma,
        _ => 0.0,
    }
}

/// Total cost `Σ‖π(T⁻¹X) − u‖² + (ρ̄(T) − s·ρ_roi)²/Σ`; infinite when a point
/// is behind the camera.
pub fn pose_cost(pose: &Pose, corr: &[Correspondence], cam: &Camera, depth_term: Option<&DepthResidualTerm>) -> f64 {
    let mut cost = 0.0;
    for c in corr {
        match reprojection_residual(pose, c, cam) {
            Ok(r) => cost += r.norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    let w = depth_weight(depth_term);
    if let (true, Some(t)) = (w > 0.0, depth_term) {
        if let Some((rho_bar, _)) = mean_inverse_depth(pose, corr) {
            let r = rho_bar - t.s * t.rho_roi;
            cost += w * r * r;
        }
    }
    cost
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Refined {
    pub pose: Pose,
    /// Accepted updates.
    pub iterations: usize,
    /// Norm of the first computed update.
    pub first_step: f64,
    pub cost: f64,
}

fn normal_equations(
    pose: &Pose,
    corr: &[Correspondence],
    cam: &Camera,
    depth_term: Option<&DepthResidualTerm>,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corr {
        if let Ok((r, j)) = reprojection_jacobian(pose, c, cam) {
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
    }
    let w = depth_weight(depth_term);
    if let (true, Some(t)) = (w > 0.0, depth_term) {
        if let Some((rho_bar, grad)) = mean_inverse_depth(pose, corr) {
            let r = rho_bar - t.s * t.rho_roi;
            h += grad * grad.transpose() * w;
            g += grad * (r * w);
        }
    }
    (h, g)
}

fn solve_damped(h: &Matrix6<f64>, g: &Vector6<f64>, lambda: f64) -> Option<Vector6<f64>> {
    let mut a = *h;
    if lambda > 0.0 {
        let scale = h.diagonal().max().max(1.0);
        for i in 0..6 {
            a[(i, i)] += lambda * scale;
        }
    }
    a.cholesky().map(|c| -c.solve(g))
}

/// Gauss–Newton on SE(3) over the reprojection error plus the optional depth
/// term. Steps that would raise the cost are retried with Levenberg damping.
///
/// The depth term's `rho_bar` is re-evaluated from the correspondences at
/// each iterate; its `rho_roi`, `s` and `sigma` are used as given.
pub fn refine_pose(pose0: &Pose, corr: &[Correspondence], cam: &Camera, depth_term: Option<&DepthResidualTerm>) -> Result<Refined> {
    refine_pose_with(pose0, corr, cam, depth_term, REFINE_MAX_ITERS)
}

fn refine_pose_with(
    pose0: &Pose,
    corr: &[Correspondence],
    cam: &Camera,
    depth_term: Option<&DepthResidualTerm>,
    max_iters: usize,
) -> Result<Refined> {
    if corr.len() < 3 {
        return Err(Error::InvalidArgument(format!("pose refinement needs 3 correspondences, got {}", corr.len())));
    }
    let mut pose = *pose0;
    let mut cost = pose_cost(&pose, corr, cam, depth_term);
    let mut first_step = f64::NAN;
    let mut accepted = 0;
    for it in 0..max_iters {
        let (h, g) = normal_equations(&pose, corr, cam, depth_term);
        let mut lambda = 0.0;
        let mut step = match solve_damped(&h, &g, 0.0) {
            Some(s) => s,
            None => {
                lambda = LM_LAMBDA;
                solve_damped(&h, &g, lambda).ok_or(Error::SingularNormalEquations)?
            }
        };
        if it == 0 {
            first_step = step.norm();
        }
        if step.norm() < REFINE_STEP_TOL {
            break;
        }
        let mut improved = false;
        for _ in 0..=LM_MAX_RETRIES {
            let cand = se3_exp(&Twist::from_vector(&step)) * pose;
            let c = pose_cost(&cand, corr, cam, depth_term);
            if c <= cost {
                let small = step.norm() < REFINE_STEP_TOL;
                pose = cand;
                cost = c;
                improved = !small;
                accepted += 1;
                break;
            }
            lambda = if lambda == 0.0 { LM_LAMBDA } else { lambda * 10.0 };
            match solve_damped(&h, &g, lambda) {
                Some(s) => step = s,
                None => break,
            }
        }
        if !improved {
            break;
        }
    }
    Ok(Refined { pose, iterations: accepted, first_step, cost })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub pose: Pose,
    /// Indices into the correspondence slice, ascending.
    pub inliers: Vec<usize>,
}

fn inlier_set(pose: &Pose, corr: &[Correspondence], cam: &Camera, threshold: f64) -> (Vec<usize>, f64) {
    let t2 = threshold * threshold;
    let mut idx = Vec::new();
    let mut err = 0.0;
    for (i, c) in corr.iter().enumerate() {
        if let Ok(r) = reprojection_residual(pose, c, cam) {
            let e = r.norm_squared();
            if e < t2 {
                idx.push(i);
                err += e;
            }
        }
    }
    (idx, err)
}

/// Samples minimal sets of 3, fits each by Gauss–Newton from `prior`, keeps
/// the model with most inliers (ties: lower inlier error) and refits it on
/// all of its inliers.
pub fn ransac_pose(corr: &[Correspondence], cam: &Camera, prior: &Pose, cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    let n = corr.len();
    if n < 3 {
        return Err(Error::InsufficientInliers { found: n, required: cfg.min_inliers.max(3) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let iters = if n == 3 { 1 } else { cfg.max_iters };
    let mut best: Option<(Pose, Vec<usize>, f64)> = None;
    let mut minimal = [Correspondence { point: Vec3::zeros(), pixel: Vec2::zeros() }; 3];
    for _ in 0..iters {
        let pick = sample(&mut rng, n, 3);
        for (k, i) in pick.iter().enumerate() {
            minimal[k] = corr[i];
        }
        let Ok(fit) = refine_pose_with(prior, &minimal, cam, None, 20) else { continue };
        let (inl, err) = inlier_set(&fit.pose, corr, cam, cfg.threshold);
        let better = match &best {
            None => true,
            Some((_, b, e)) => inl.len() > b.len() || (inl.len() == b.len() && err < *e),
        };
        if better {
            let full = inl.len() == n;
            best = Some((fit.pose, inl, err));
            if full {
                break;
            }
        }
    }
    let (pose, inliers, _) = best.ok_or(Error::InsufficientInliers { found: 0, required: cfg.min_inliers })?;
    if inliers.len() < cfg.min_inliers.max(3) {
        return Err(Error::InsufficientInliers { found: inliers.len(), required: cfg.min_inliers.max(3) });
    }
    let subset: Vec<Correspondence> = inliers.iter().map(|&i| corr[i]).collect();
    let refit = refine_pose(&pose, &subset, cam, None)?;
    let (refit_inliers, _) = inlier_set(&refit.pose, corr, cam, cfg.threshold);
    if refit_inliers.len() >= inliers.len() {
        Ok(RansacResult { pose: refit.pose, inliers: refit_inliers })
    } else {
        Ok(RansacResult { pose: refit.pose, inliers })
    }
}
