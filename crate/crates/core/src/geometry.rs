//! Rigid-body algebra and the pinhole camera.
//!
//! Conventions used throughout the crate:
//!
//! - A [`Pose`] named `a_from_b` maps coordinates expressed in frame `b` into
//!   frame `a`. `object_from_world` is the refinement variable,
//!   `world_from_camera` is a viewpoint.
//! - Twists are stored `[v; ω]` (translation part first).
//! - Pose updates are left-multiplicative: `T ← exp(δ)·T`.
//! - Millimetres and radians everywhere.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Rotation drift is bounded by re-projecting onto SO(3) after this many
/// chained compositions.
const REORTHONORMALIZE_EVERY: u32 = 50;

/// Below this angle the closed forms switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-4;

/// Skew-symmetric matrix with `hat(a) * b == a.cross(b)`.
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Tangent vector of SE(3), `[v; ω]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub v: Vec3,
    pub omega: Vec3,
}

impl Twist {
    pub fn new(v: Vec3, omega: Vec3) -> Self {
        Self { v, omega }
    }

    pub fn zero() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_vector(x: &Vec6) -> Self {
        Self::new(Vec3::new(x[0], x[1], x[2]), Vec3::new(x[3], x[4], x[5]))
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(self.v.x, self.v.y, self.v.z, self.omega.x, self.omega.y, self.omega.z)
    }

    pub fn exp(&self) -> Pose {
        exp_map(self)
    }
}

/// Rigid transform. See the module docs for the naming convention.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
    compositions: u32,
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            compositions: 0,
        }
    }

    /// Builds a pose after checking that `rotation` is a proper rotation
    /// (orthonormal within 1e-6, positive determinant).
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if !err.is_finite() || err > 1e-6 || rotation.determinant() <= 0.0 {
            return Err(Error::Contract(format!(
                "not a rotation matrix (orthonormality error {err:.3e})"
            )));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Contract("non-finite translation".into()));
        }
        Ok(Self::from_parts_unchecked(rotation, translation))
    }

    pub(crate) fn from_parts_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
            compositions: 0,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::from_parts_unchecked(Mat3::identity(), t)
    }

    /// Rotation given as a rotation vector (axis × angle, radians).
    pub fn from_axis_angle(rotvec: Vec3, translation: Vec3) -> Self {
        Self::from_parts_unchecked(so3_exp(&rotvec), translation)
    }

    /// Camera-style pose located at `eye` with +z looking at `target` and
    /// +y pointing roughly along `-up` (image rows grow downwards).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(Error::Contract("look_at: eye equals target".into()));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::Contract("look_at: up is parallel to the view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Mat3::from_columns(&[x, y, z]);
        Ok(Self::from_parts_unchecked(r, eye))
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
            compositions: self.compositions,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        let mut out = Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            compositions: self.compositions.max(other.compositions) + 1,
        };
        if out.compositions >= REORTHONORMALIZE_EVERY {
            out.rotation = orthonormalize(&out.rotation);
            out.compositions = 0;
        }
        out
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn transform_cloud(&self, points: &[Vec3]) -> Vec<Vec3> {
        transform_cloud(points, self)
    }

    pub fn log(&self) -> Twist {
        log_map(self)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn to_matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// 4×4 homogeneous matrix, row-major.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::Contract(format!(
                "pose matrix needs 16 values, got {}",
                values.len()
            )));
        }
        let r = Mat3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9], values[10],
        );
        let t = Vec3::new(values[3], values[7], values[11]);
        Self::new(r, t)
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> Self {
        Self::from_parts_unchecked(orthonormalize(&self.rotation), self.translation)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    matrix: Vec<f64>,
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRecord {
            matrix: self.to_row_major().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        Pose::from_row_major(&rec.matrix).map_err(serde::de::Error::custom)
    }
}

/// Nearest rotation in the Frobenius sense (polar decomposition).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

fn rotation_angle(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = vee(r).norm();
    s.atan2(c)
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Principal logarithm of a rotation; the result has norm in `[0, π]`.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s_vec = vee(r);
    let s = s_vec.norm();
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        return s_vec * (1.0 + theta * theta / 6.0);
    }
    if c > -0.9 {
        return s_vec * (theta / s);
    }
    // Near π the skew part vanishes; read the axis off the symmetric part,
    // which equals (1 - cos θ)·a·aᵀ + cos θ·I.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * c;
    let outer = sym / (1.0 - c);
    let k = (0..3).max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)])).unwrap();
    let mut axis = outer.column(k) / outer[(k, k)].max(0.0).sqrt();
    axis.normalize_mut();
    if axis.dot(&s_vec) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// `V(ω)` of the SE(3) exponential, translating `v` into `t = V·v`.
fn left_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (b, c) = if theta < SMALL_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Mat3::identity() + k * b + k * k * c
}

fn left_jacobian_inverse(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        (1.0 - a / (2.0 * b)) / theta2
    };
    Mat3::identity() - k * 0.5 + k * k * d
}

/// Closed-form SE(3) exponential.
pub fn exp_map(xi: &Twist) -> Pose {
    Pose::from_parts_unchecked(so3_exp(&xi.omega), left_jacobian(&xi.omega) * xi.v)
}

/// Principal SE(3) logarithm.
pub fn log_map(pose: &Pose) -> Twist {
    let omega = so3_log(&pose.rotation);
    Twist::new(left_jacobian_inverse(&omega) * pose.translation, omega)
}

pub fn transform_cloud(points: &[Vec3], pose: &Pose) -> Vec<Vec3> {
    points.iter().map(|p| pose.transform_point(p)).collect()
}

/// Rectified pinhole camera of one stereo eye; the second eye sits
/// `baseline` millimetres along +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub baseline: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, baseline: f64) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            baseline,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.baseline > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid camera model {self:?}")))
        }
    }

    pub fn contains(&self, u: &Vec2) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x <= (self.width - 1) as f64 && u.y <= (self.height - 1) as f64
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<Vec2> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// `z · K⁻¹ · [u, 1]ᵀ`.
    pub fn backproject(&self, u: &Vec2, z: f64) -> Result<Vec3> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::InvalidMeasurement(format!("depth {z} is not positive")));
        }
        if !self.contains(u) {
            return Err(Error::InvalidMeasurement(format!(
                "pixel ({}, {}) outside the image",
                u.x, u.y
            )));
        }
        Ok(self.ray(u) * z)
    }

    /// Unnormalized viewing ray `K⁻¹ · [u, 1]ᵀ` (unit z component).
    pub fn ray(&self, u: &Vec2) -> Vec3 {
        Vec3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    pub fn bearing(&self, u: &Vec2) -> Vec3 {
        self.ray(u).normalize()
    }

    pub fn disparity(&self, z: f64) -> f64 {
        self.fx * self.baseline / z
    }

    pub fn depth_from_disparity(&self, d: f64) -> f64 {
        self.fx * self.baseline / d
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

pub fn backproject(u: &Vec2, z: f64, cam: &CameraModel) -> Result<Vec3> {
    cam.backproject(u, z)
}
