//! Pinhole projection geometry and the differentiable camera-pose trajectory.
//!
//! Conventions: world coordinates are the reference (frame 0) camera frame.
//! A `Pose` maps reference coordinates into a frame's camera coordinates as
//! `R·X + t`. Rays are z-normalized, so depth along a ray is z-depth. Frame 0
//! is gauge-fixed to the identity pose by pinning the first trajectory
//! control point to zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Points with z at or below this are "behind the camera" for projection.
pub const Z_MIN_PROJECT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("curve parameter {0} outside [0, 1]")]
    TauOutOfRange(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!("fx={}, fy={}", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) || !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} sensor",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Same camera at a scaled pixel pitch (0.5 halves the resolution).
    pub fn scaled(&self, s: f64) -> Intrinsics {
        Intrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width as f64 * s).round() as usize,
            height: (self.height as f64 * s).round() as usize,
        }
    }

    /// Same camera with the principal point shifted by whole-sensor pixels
    /// before scaling; used for the phase offsets of mosaic planes.
    pub fn shifted(&self, dx: f64, dy: f64) -> Intrinsics {
        Intrinsics { cx: self.cx - dx, cy: self.cy - dy, ..*self }
    }
}

/// Rigid pose as an axis-angle rotation (radians·axis) and a translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Pose {
        Pose::default()
    }

    pub fn inverse(&self) -> Pose {
        let r = rodrigues(self.rotation);
        let rt = mat3_transpose(&r);
        let t = mat3_mul_vec(&rt, &self.translation);
        Pose { rotation: [-self.rotation[0], -self.rotation[1], -self.rotation[2]], translation: [-t[0], -t[1], -t[2]] }
    }
}

/// Z-normalized ray direction in camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    /// `(dx, dy, 1)` — the z component is exactly 1.
    pub dir: Vec3,
}

/// Bézier control polygons for rotation and translation over normalized
/// burst time τ ∈ [0, 1]. All-zero control points give the identity pose for
/// every τ; `pose_at(0)` always equals the first control point exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseTrajectory {
    pub rot_ctrl: Vec<Vec3>,
    pub trans_ctrl: Vec<Vec3>,
}

impl PoseTrajectory {
    /// Identity trajectory of the given Bézier degree.
    pub fn zero(degree: usize) -> PoseTrajectory {
        PoseTrajectory { rot_ctrl: vec![[0.0; 3]; degree + 1], trans_ctrl: vec![[0.0; 3]; degree + 1] }
    }

    pub fn degree(&self) -> usize {
        self.rot_ctrl.len() - 1
    }

    pub fn is_identity(&self) -> bool {
        self.rot_ctrl.iter().chain(&self.trans_ctrl).all(|c| c.iter().all(|x| *x == 0.0))
    }
}

/// Ray through a pixel: `((u-cx)/fx, (v-cy)/fy, 1)`. Pixels outside the
/// sensor are allowed (supersampling).
#[inline]
pub fn ray_direction(k: &Intrinsics, u: f64, v: f64) -> Ray {
    Ray { dir: [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0] }
}

/// Pinhole projection. The flag is false when the point is at or behind
/// z = [`Z_MIN_PROJECT`]; the coordinates are then computed against a clamped
/// z and the caller must mask the sample.
#[inline]
pub fn project(k: &Intrinsics, p: Vec3) -> (f64, f64, bool) {
    let in_front = p[2] > Z_MIN_PROJECT;
    let z = p[2].max(Z_MIN_PROJECT);
    (k.fx * p[0] / z + k.cx, k.fy * p[1] / z + k.cy, in_front)
}

/// Axis-angle to rotation matrix (exponential map). Below `θ² = 1e-8` the
/// sin/cos coefficients switch to their 2nd-order Taylor expansions, which
/// keeps the map smooth through the origin.
pub fn rodrigues(aa: Vec3) -> Mat3 {
    let t2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
    let (a, b) = rodrigues_coeffs(t2);
    rodrigues_from_coeffs(aa, a, b)
}

/// `(sin θ / θ, (1 - cos θ) / θ²)` as functions of θ².
#[inline]
pub fn rodrigues_coeffs(theta_sq: f64) -> (f64, f64) {
    if theta_sq < 1e-8 {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let t = theta_sq.sqrt();
        (t.sin() / t, (1.0 - t.cos()) / theta_sq)
    }
}

/// `R = I + a·K + b·K²` with `K = skew(ω)`, using `K² = ωωᵀ − θ²I`.
#[inline]
pub fn rodrigues_from_coeffs(aa: Vec3, a: f64, b: f64) -> Mat3 {
    let [x, y, z] = aa;
    let t2 = x * x + y * y + z * z;
    let d = 1.0 - b * t2;
    [
        [d + b * x * x, b * x * y - a * z, b * x * z + a * y],
        [b * x * y + a * z, d + b * y * y, b * y * z - a * x],
        [b * x * z - a * y, b * y * z + a * x, d + b * z * z],
    ]
}

/// De Casteljau evaluation of both control polygons at τ ∈ [0, 1].
pub fn pose_at(traj: &PoseTrajectory, tau: f64) -> Result<Pose, CameraError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CameraError::TauOutOfRange(tau));
    }
    Ok(Pose { rotation: de_casteljau(&traj.rot_ctrl, tau), translation: de_casteljau(&traj.trans_ctrl, tau) })
}

fn de_casteljau(ctrl: &[Vec3], tau: f64) -> Vec3 {
    let mut pts = ctrl.to_vec();
    let mut n = pts.len();
    while n > 1 {
        for i in 0..n - 1 {
            for d in 0..3 {
                pts[i][d] = (1.0 - tau) * pts[i][d] + tau * pts[i + 1][d];
            }
        }
        n -= 1;
    }
    pts[0]
}

/// Bernstein basis row of the given degree at τ; `pose_at` is linear in the
/// control points with exactly these weights.
pub fn bernstein_row(degree: usize, tau: f64) -> Vec<f64> {
    let mut row = vec![0.0; degree + 1];
    row[0] = 1.0;
    // Incremental multiplication keeps this exact at τ = 0 and 1.
    for i in 1..=degree {
        let mut prev = row[0];
        row[0] *= 1.0 - tau;
        for j in 1..=i {
            let cur = row[j];
            row[j] = tau * prev + (1.0 - tau) * cur;
            prev = cur;
        }
    }
    row
}

/// `rodrigues(rotation)·p + translation`.
#[inline]
pub fn transform(pose: &Pose, p: Vec3) -> Vec3 {
    let r = rodrigues(pose.rotation);
    let rp = mat3_mul_vec(&r, &p);
    [rp[0] + pose.translation[0], rp[1] + pose.translation[1], rp[2] + pose.translation[2]]
}

// ── small linear algebra helpers ─────────────────────────────────────

#[inline]
pub fn mat3_mul_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    [[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]]
}

#[inline]
pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Geodesic angle between two rotations given as axis-angle vectors, radians.
pub fn rotation_geodesic(a: Vec3, b: Vec3) -> f64 {
    let ra = rodrigues(a);
    let rb = rodrigues(b);
    let rel = mat3_mul(&mat3_transpose(&ra), &rb);
    let tr = rel[0][0] + rel[1][1] + rel[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}
