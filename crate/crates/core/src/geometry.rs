//! Rigid-body math on SE(3) and the pinhole camera model.
//!
//! Poses are stored as a unit quaternion plus translation. Every pose in this
//! crate maps points from the camera frame into the world frame.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle (rad) exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;
/// `se3_log` refuses rotations closer than this to pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;
/// Points closer than this to the image plane cannot be projected.
pub const MIN_PROJECT_Z: f64 = 1e-6;

const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-10;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A 3-D rotation stored as a unit quaternion with `w >= 0`.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        write!(f, "Rotation(w={w}, x={x}, y={y}, z={z})")
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self { q: UnitQuaternion::identity() }
    }

    /// Builds a rotation from raw quaternion components, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::canonical(Quaternion::new(w, x, y, z))
    }

    fn canonical(q: Quaternion<f64>) -> Self {
        let n = q.norm();
        let mut q = q / n;
        if q.w < 0.0 {
            q = -q;
        }
        Self { q: UnitQuaternion::new_unchecked(q) }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        Self::exp(&(axis * (angle / n)))
    }

    /// SO(3) exponential of a rotation vector.
    pub fn exp(phi: &Vec3) -> Self {
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let (w, s) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        Self::canonical(Quaternion::new(w, s * phi.x, s * phi.y, s * phi.z))
    }

    /// SO(3) logarithm; the returned rotation vector has norm in `[0, pi]`.
    pub fn log(&self) -> Vec3 {
        let q = self.q.quaternion();
        let v = q.imag();
        let n = v.norm();
        let w = q.w;
        let theta = 2.0 * n.atan2(w);
        if theta < SMALL_ANGLE {
            // atan(n / w) / n ~ (1 / w) * (1 - n^2 / (3 w^2))
            v * (2.0 / w * (1.0 - n * n / (3.0 * w * w)))
        } else {
            v * (theta / n)
        }
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.q.quaternion();
        2.0 * q.imag().norm().atan2(q.w)
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.q.quaternion().norm()
    }

    pub fn matrix(&self) -> Mat3 {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        let r = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self::canonical(*UnitQuaternion::from_rotation_matrix(&r).quaternion())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.q * v
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.q.quaternion().conjugate())
    }

    /// Angle of `self⁻¹ · other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Self::canonical(self.q.quaternion() * rhs.q.quaternion())
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Rotation::identity(), translation: t }
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self { rotation: r, translation: Vec3::zeros() }
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self { rotation: r_inv, translation: -r_inv.rotate(&self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// Applies the inverse transform without materializing it.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse().rotate(&(p - self.translation))
    }

    /// Rotation angle (rad) plus translation distance (m) between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        (self.rotation.angle_to(&other.rotation), (self.translation - other.translation).norm())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.rotate(&rhs.translation) + self.translation,
        }
    }
}

/// Element of se(3): translational part `rho` (m) and rotation vector `phi` (rad).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rho: Vec3,
    pub phi: Vec3,
}

impl Twist {
    pub fn new(rho: Vec3, phi: Vec3) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `[rho; phi]`
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self { rho: Vec3::new(v[0], v[1], v[2]), phi: Vec3::new(v[3], v[4], v[5]) }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { rho: self.rho * s, phi: self.phi * s }
    }
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn left_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let s = (0.5 * theta).sin();
        (2.0 * s * s / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Mat3::identity() + k * b + k * k * c
}

fn left_jacobian_inverse(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let d = if theta < 1e-3 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta2
    };
    Mat3::identity() - k * 0.5 + k * k * d
}

/// SE(3) exponential in closed form.
pub fn se3_exp(xi: &Twist) -> Pose {
    Pose { rotation: Rotation::exp(&xi.phi), translation: left_jacobian(&xi.phi) * xi.rho }
}

/// SE(3) logarithm. Fails when the rotation angle is within 1e-6 of pi.
pub fn se3_log(pose: &Pose) -> Result<Twist> {
    let angle = pose.rotation.angle();
    if std::f64::consts::PI - angle < NEAR_PI_MARGIN {
        return Err(Error::AngleNearPi { angle });
    }
    let phi = pose.rotation.log();
    Ok(Twist { rho: left_jacobian_inverse(&phi) * pose.translation, phi })
}

/// Geodesic interpolation `T0 · exp(alpha · log(T0⁻¹ T1))`.
///
/// Returns `t0` unchanged at `alpha == 0`.
pub fn interpolate_pose(t0: &Pose, t1: &Pose, alpha: f64) -> Result<Pose> {
    if alpha == 0.0 {
        return Ok(*t0);
    }
    let xi = se3_log(&(t0.inverse() * *t1))?;
    Ok(*t0 * se3_exp(&xi.scaled(alpha)))
}

/// Radial-tangential (Brown–Conrady) distortion coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        *self == Distortion::default()
    }

    /// Maps a normalized undistorted point to its distorted location.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    /// Distorted point and the 2×2 Jacobian `d(xd, yd) / d(x, y)` (row-major).
    fn distort_with_jacobian(&self, x: f64, y: f64) -> ((f64, f64), [f64; 4]) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dradial = self.k1 + r2 * (2.0 * self.k2 + 3.0 * self.k3 * r2);
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        let cross = 2.0 * x * y * dradial + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let j = [
            radial + 2.0 * x * x * dradial + 2.0 * self.p1 * y + 6.0 * self.p2 * x,
            cross,
            cross,
            radial + 2.0 * y * y * dradial + 6.0 * self.p1 * y + 2.0 * self.p2 * x,
        ];
        ((xd, yd), j)
    }

    /// Inverts [`Distortion::distort`] by fixed-point iteration.
    pub fn undistort(&self, xd: f64, yd: f64) -> (f64, f64) {
        if self.is_zero() {
            return (xd, yd);
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..UNDISTORT_MAX_ITERS {
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            let nx = (xd - dx) / radial;
            let ny = (yd - dy) / radial;
            let step = (nx - x).abs().max((ny - y).abs());
            x = nx;
            y = ny;
            if step < UNDISTORT_TOL {
                break;
            }
        }
        (x, y)
    }
}

/// Pinhole camera with radial-tangential distortion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub distortion: Distortion,
}

impl Default for Camera {
    /// A DAVIS 346 sized sensor (346×260) with an ~81° horizontal field of view.
    fn default() -> Self {
        Self {
            fx: 200.0,
            fy: 200.0,
            cx: 173.0,
            cy: 130.0,
            width: 346,
            height: 260,
            distortion: Distortion::default(),
        }
    }
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        distortion: Distortion,
    ) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, distortion };
        cam.validate()?;
        Ok(cam)
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(fx, fy, cx, cy, width, height, Distortion::default())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} sensor",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// The same intrinsics with distortion removed.
    pub fn undistorted(&self) -> Self {
        Self { distortion: Distortion::default(), ..*self }
    }

    pub fn contains(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= (self.width - 1) as f64 && px.y <= (self.height - 1) as f64
    }

    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        if p.z <= MIN_PROJECT_Z {
            return Err(Error::BehindCamera { z: p.z });
        }
        let (xd, yd) = self.distortion.distort(p.x / p.z, p.y / p.z);
        Ok(Vec2::new(self.fx * xd + self.cx, self.fy * yd + self.cy))
    }

    /// Projection plus its Jacobian with respect to the camera-frame point.
    pub fn project_with_jacobian(&self, p: &Vec3) -> Result<(Vec2, Matrix2x3<f64>)> {
        if p.z <= MIN_PROJECT_Z {
            return Err(Error::BehindCamera { z: p.z });
        }
        let iz = 1.0 / p.z;
        let (x, y) = (p.x * iz, p.y * iz);
        let ((xd, yd), d) = self.distortion.distort_with_jacobian(x, y);
        // d(x, y) / dP
        let n = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
        let dd = nalgebra::Matrix2::new(self.fx * d[0], self.fx * d[1], self.fy * d[2], self.fy * d[3]);
        Ok((Vec2::new(self.fx * xd + self.cx, self.fy * yd + self.cy), dd * n))
    }

    /// Undistorted normalized coordinates of a pixel (the ray at depth 1).
    pub fn normalized_ray(&self, px: &Vec2) -> Vec3 {
        let xd = (px.x - self.cx) / self.fx;
        let yd = (px.y - self.cy) / self.fy;
        let (x, y) = self.distortion.undistort(xd, yd);
        Vec3::new(x, y, 1.0)
    }

    /// Lifts a pixel to the camera-frame point at the given depth (z).
    pub fn backproject(&self, px: &Vec2, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth { depth });
        }
        Ok(self.normalized_ray(px) * depth)
    }

    /// Parses a `calib.txt` line: `fx fy cx cy k1 k2 p1 p2 k3`.
    pub fn from_calib_str(text: &str, width: u32, height: u32) -> Result<Self> {
        let (line_no, line) = text
            .lines()
            .enumerate()
            .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .ok_or_else(|| Error::parse(1, "calibration file is empty"))?;
        let vals = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(line_no + 1, e.to_string()))?;
        if vals.len() != 9 {
            return Err(Error::parse(line_no + 1, format!("expected 9 values, found {}", vals.len())));
        }
        let distortion =
            Distortion { k1: vals[4], k2: vals[5], p1: vals[6], p2: vals[7], k3: vals[8] };
        Self::new(vals[0], vals[1], vals[2], vals[3], width, height, distortion)
    }

    pub fn to_calib_line(&self) -> String {
        let d = &self.distortion;
        format!(
            "{} {} {} {} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, d.k1, d.k2, d.p1, d.p2, d.k3
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn to_matrix4(p: &Pose) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
        m
    }

    /// exp of the 4×4 twist matrix by scaling and squaring of a Taylor series.
    fn matrix_exp_oracle(xi: &Twist) -> Matrix4<f64> {
        let mut a = Matrix4::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&xi.phi));
        a.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.rho);
        let norm = a.abs().max();
        let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
        let scaled = a / 2f64.powi(squarings as i32);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..30 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    fn pose_err(a: &Pose, b: &Pose) -> f64 {
        (to_matrix4(a) - to_matrix4(b)).abs().max()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = se3_exp(&Twist::zero());
        assert_eq!(p, Pose::identity());
    }

    #[test]
    fn exp_quarter_turn_yaw() {
        let p = se3_exp(&Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2)));
        let x = p.rotation.rotate(&Vec3::x());
        assert!((x - Vec3::y()).norm() < 1e-12);
        assert!(p.translation.norm() < 1e-15);
    }

    #[test]
    fn exp_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let phi = random_unit(&mut rng) * rng.random_range(0.0..PI - 1e-3);
            let rho = random_unit(&mut rng) * rng.random_range(0.0..3.0);
            let xi = Twist::new(rho, phi);
            let oracle = matrix_exp_oracle(&xi);
            let got = to_matrix4(&se3_exp(&xi));
            assert!((oracle - got).abs().max() < 1e-9, "{:?}", xi);
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let axis = Vec3::new(0.3, -0.2, 0.9).normalize();
        for &theta in &[0.0, 1e-12, 5e-9, 1e-8, 2e-8, 1e-6] {
            let xi = Twist::new(Vec3::new(0.1, 0.2, 0.3), axis * theta);
            let oracle = matrix_exp_oracle(&xi);
            assert!((oracle - to_matrix4(&se3_exp(&xi))).abs().max() < 1e-14);
            let back = se3_log(&se3_exp(&xi)).unwrap();
            assert!((back.to_vector() - xi.to_vector()).norm() < 1e-14);
        }
    }

    #[test]
    fn log_of_identity_and_translation() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
        let xi = se3_log(&Pose::from_translation(Vec3::new(0.3, 0.0, 0.0))).unwrap();
        assert_eq!(xi.rho, Vec3::new(0.3, 0.0, 0.0));
        assert_eq!(xi.phi, Vec3::zeros());
    }

    #[test]
    fn log_near_pi_is_rejected() {
        let p = Pose::from_rotation(Rotation::from_axis_angle(&Vec3::z(), PI - 1e-7));
        assert!(matches!(se3_log(&p), Err(Error::AngleNearPi { .. })));
        let p = Pose::from_rotation(Rotation::from_axis_angle(&Vec3::z(), PI - 1e-3));
        assert!(se3_log(&p).is_ok());
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = Rotation::from_axis_angle(&random_unit(&mut rng), rng.random_range(0.0..PI - 1e-3));
            let p = Pose::new(r, random_unit(&mut rng) * rng.random_range(0.0..5.0));
            let back = se3_exp(&se3_log(&p).unwrap());
            assert!(pose_err(&p, &back) < 1e-9);
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let t0 = Pose::new(Rotation::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7), Vec3::new(1.0, -2.0, 0.5));
        let t1 = Pose::new(Rotation::from_axis_angle(&Vec3::new(-1.0, 0.0, 1.0), 2.1), Vec3::new(-3.0, 0.2, 4.0));
        let a0 = interpolate_pose(&t0, &t1, 0.0).unwrap();
        assert_eq!(a0, t0);
        assert!(pose_err(&interpolate_pose(&t0, &t1, 1.0).unwrap(), &t1) < 1e-9);
    }

    #[test]
    fn interpolation_is_linear_without_rotation() {
        let t0 = Pose::identity();
        let t1 = Pose::from_translation(Vec3::new(2.0, 0.0, 0.0));
        let mid = interpolate_pose(&t0, &t1, 0.5).unwrap();
        assert!((mid.translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(mid.rotation.angle() < 1e-15);
    }

    #[test]
    fn interpolation_geodesic_segment_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t0 = Pose::new(
                Rotation::from_axis_angle(&random_unit(&mut rng), rng.random_range(0.0..3.0)),
                random_unit(&mut rng),
            );
            let t1 = t0
                * Pose::new(
                    Rotation::from_axis_angle(&random_unit(&mut rng), rng.random_range(0.0..2.5)),
                    random_unit(&mut rng) * 2.0,
                );
            let b: f64 = rng.random_range(0.2..1.0);
            let a: f64 = rng.random_range(0.0..b);
            let direct = interpolate_pose(&t0, &t1, a).unwrap();
            let mid = interpolate_pose(&t0, &t1, b).unwrap();
            let nested = interpolate_pose(&t0, &mid, a / b).unwrap();
            assert!(pose_err(&direct, &nested) < 1e-9);
        }
    }

    #[test]
    fn composition_keeps_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = Rotation::identity();
        for _ in 0..100_000 {
            acc = acc * Rotation::from_axis_angle(&random_unit(&mut rng), rng.random_range(0.0..PI));
            assert!((acc.quaternion_norm() - 1.0).abs() < 1e-12);
            assert!(acc.wxyz()[0] >= 0.0);
        }
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let p = Pose::new(Rotation::from_axis_angle(&Vec3::new(0.2, 1.0, -0.3), 1.3), Vec3::new(4.0, 5.0, -6.0));
        assert!(pose_err(&(p.inverse() * p), &Pose::identity()) < 1e-10);
        let x = Vec3::new(0.3, -1.0, 2.0);
        assert!((p.inverse_transform_point(&p.transform_point(&x)) - x).norm() < 1e-12);
    }

    fn cam() -> Camera {
        Camera::pinhole(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn project_pinhole_cases() {
        let c = cam();
        assert_eq!(c.project(&Vec3::new(0.0, 0.0, 1.0)).unwrap(), Vec2::new(50.0, 50.0));
        assert_eq!(c.project(&Vec3::new(0.1, 0.0, 1.0)).unwrap(), Vec2::new(60.0, 50.0));
        assert!(matches!(c.project(&Vec3::new(0.0, 0.0, 0.0)), Err(Error::BehindCamera { .. })));
        assert!(matches!(c.project(&Vec3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn project_with_radial_distortion_matches_polynomial() {
        let mut c = cam();
        c.distortion.k1 = -0.1;
        let p = Vec3::new(0.3, -0.2, 1.5);
        // per-term evaluation
        let x = 0.3 / 1.5;
        let y = -0.2 / 1.5;
        let r2 = x * x + y * y;
        let factor = 1.0 + (-0.1) * r2;
        let expected = Vec2::new(100.0 * x * factor + 50.0, 100.0 * y * factor + 50.0);
        assert!((c.project(&p).unwrap() - expected).norm() < 1e-12);
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let mut c = cam();
        c.distortion = Distortion { k1: -0.2, k2: 0.05, p1: 0.001, p2: -0.002, k3: 0.01 };
        let p = Vec3::new(0.2, -0.3, 1.7);
        let (_, j) = c.project_with_jacobian(&p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut dp = Vec3::zeros();
            dp[k] = h;
            let fd = (c.project(&(p + dp)).unwrap() - c.project(&(p - dp)).unwrap()) / (2.0 * h);
            assert!((fd - j.column(k)).norm() < 1e-6);
        }
    }

    #[test]
    fn backproject_cases() {
        let c = cam();
        assert_eq!(c.backproject(&Vec2::new(50.0, 50.0), 2.0).unwrap(), Vec3::new(0.0, 0.0, 2.0));
        assert!(matches!(c.backproject(&Vec2::new(1.0, 1.0), 0.0), Err(Error::NonPositiveDepth { .. })));
    }

    #[test]
    fn backproject_project_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for distortion in [
            Distortion::default(),
            Distortion { k1: -0.15, k2: 0.02, p1: 0.0005, p2: -0.0007, k3: 0.0 },
        ] {
            let c = Camera { distortion, ..Camera::default() };
            for _ in 0..100 {
                let px = Vec2::new(rng.random_range(0.0..345.0), rng.random_range(0.0..259.0));
                let d = rng.random_range(0.5..10.0);
                let back = c.project(&c.backproject(&px, d).unwrap()).unwrap();
                assert!((back - px).norm() < 1e-6, "{px:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn calibration_line_roundtrip() {
        let text = "200 201.5 172.5 129.25 -0.1 0.01 0.001 -0.002 0\n";
        let c = Camera::from_calib_str(text, 346, 260).unwrap();
        assert_eq!(c.fy, 201.5);
        assert_eq!(c.distortion.p2, -0.002);
        let again = Camera::from_calib_str(&c.to_calib_line(), 346, 260).unwrap();
        assert_eq!(c, again);
        assert!(Camera::from_calib_str("1 2 3", 346, 260).is_err());
        assert!(Camera::from_calib_str("0 1 2 3 0 0 0 0 0", 346, 260).is_err());
    }
}
