//! Rotation and camera math shared by every other module.
//!
//! Conventions:
//! - quaternions are scalar-first `(w, x, y, z)` and act on column vectors,
//!   `v' = q v q*`;
//! - Euler angles are intrinsic Z-Y-X: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`;
//! - the camera frame has `z` along the optical axis (positive toward the
//!   target), `x` to the right and `y` down, matching pixel `u`/`v`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Mul, Neg};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Normalizes `(w, x, y, z)`. Returns `None` for a zero or non-finite input.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return None;
        }
        Some(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Normalizing constructor; panics on a zero quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::try_new(w, x, y, z).expect("quaternion must be finite and non-zero")
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm3(axis);
        if n == 0.0 {
            return Self::identity();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle([1.0, 0.0, 0.0], angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle([0.0, 1.0, 0.0], angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], angle)
    }

    pub fn conjugate(self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Hamilton product `self * rhs`, renormalized.
    pub fn multiply(self, rhs: Self) -> Self {
        let (a, b, c, d) = (self.w, self.x, self.y, self.z);
        let (e, f, g, h) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Self::new(
            a * e - b * f - c * g - d * h,
            a * f + b * e + c * h - d * g,
            a * g - b * h + c * e + d * f,
            a * h + b * g - c * f + d * e,
        )
    }

    /// Geodesic rotation angle between the two rotations, in `[0, pi]`.
    ///
    /// Equals `2 acos(|<a, b>|)`; evaluated as `4 atan2(|a - b|, |a + b|)`
    /// after aligning signs (the 4-D angle is half the rotation angle), which
    /// stays accurate near zero.
    pub fn angular_distance(self, other: Self) -> f64 {
        let b = if self.dot(other) < 0.0 { -other } else { other };
        let diff = [self.w - b.w, self.x - b.x, self.y - b.y, self.z - b.z];
        let sum = [self.w + b.w, self.x + b.x, self.y + b.y, self.z + b.z];
        let nd = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ns = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        (4.0 * nd.atan2(ns)).clamp(0.0, PI)
    }

    pub fn rotate_vector(self, v: Vec3) -> Vec3 {
        // v + 2 w (u x v) + 2 u x (u x v)
        let u = [self.x, self.y, self.z];
        let t = scale3(cross3(u, v), 2.0);
        add3(add3(v, scale3(t, self.w)), cross3(u, t))
    }

    pub fn to_rotation_matrix(self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Representative with `w >= 0` (first non-zero component positive when `w == 0`).
    pub fn canonical(self) -> Self {
        let a = self.to_array();
        match a.iter().find(|v| **v != 0.0) {
            Some(v) if *v < 0.0 => -self,
            _ => self,
        }
    }
}

impl Neg for UnitQuaternion {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

impl Mul for UnitQuaternion {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.multiply(rhs)
    }
}

pub fn quat_multiply(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion {
    a.multiply(b)
}

pub fn quat_angular_distance(a: UnitQuaternion, b: UnitQuaternion) -> f64 {
    a.angular_distance(b)
}

pub fn rotate_vector(q: UnitQuaternion, v: Vec3) -> Vec3 {
    q.rotate_vector(v)
}

/// Camera-frame position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: Vec3) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        norm3(self.to_array())
    }

    pub fn distance(self, other: Self) -> f64 {
        norm3(sub3(self.to_array(), other.to_array()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub orientation: UnitQuaternion,
    pub position: Position3,
}

impl Pose {
    pub fn new(orientation: UnitQuaternion, position: Position3) -> Self {
        Self {
            orientation,
            position,
        }
    }

    /// Body-frame point to camera frame.
    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add3(self.orientation.rotate_vector(p), self.position.to_array())
    }
}

/// Intrinsic Z-Y-X Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub const fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn euler_to_quat(e: EulerAngles) -> UnitQuaternion {
    let (sy, cy) = (0.5 * e.yaw).sin_cos();
    let (sp, cp) = (0.5 * e.pitch).sin_cos();
    let (sr, cr) = (0.5 * e.roll).sin_cos();
    // qz(yaw) * qy(pitch) * qx(roll), expanded
    UnitQuaternion::new(
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    )
}

/// Inverse of [`euler_to_quat`], returning canonical-range angles.
///
/// At gimbal lock (`|pitch| = pi/2`) yaw and roll are coupled; roll is set
/// to zero and the combined rotation is folded into yaw.
pub fn quat_to_euler(q: UnitQuaternion) -> EulerAngles {
    let r = q.to_rotation_matrix();
    let cos_pitch = r[0][0].hypot(r[1][0]);
    let pitch = (-r[2][0]).atan2(cos_pitch).clamp(-FRAC_PI_2, FRAC_PI_2);
    if cos_pitch < 1e-12 {
        let yaw = (-r[0][1]).atan2(r[1][1]);
        return EulerAngles::new(wrap_angle(yaw), pitch.signum() * FRAC_PI_2, 0.0);
    }
    let yaw = r[1][0].atan2(r[0][0]);
    let roll = r[2][1].atan2(r[2][2]);
    EulerAngles::new(wrap_angle(yaw), pitch, wrap_angle(roll))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self::desk()
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// 192x120 desk-scale camera, principal point at the image center.
    pub fn desk() -> Self {
        Self {
            fx: 240.0,
            fy: 240.0,
            cx: 96.0,
            cy: 60.0,
            width: 192,
            height: 120,
        }
    }

    /// Camera of the same field of view at another resolution, with the
    /// principal point at the image center.
    pub fn with_size(width: u32, height: u32) -> Self {
        let s = width as f64 / 192.0;
        Self {
            fx: 240.0 * s,
            fy: 240.0 * s,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn project(&self, p: Vec3) -> Result<(f64, f64)> {
        if p[2] <= 0.0 {
            return Err(Error::NonPositiveDepth(p[2]));
        }
        Ok((
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ))
    }
}

/// Pinhole projection to pixel coordinates.
pub fn project_point(p: Position3, k: &CameraIntrinsics) -> Result<(f64, f64)> {
    k.project(p.to_array())
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}
