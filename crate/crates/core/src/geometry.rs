//! Rigid-body transforms on SE(3), their se(3) tangent space, and the pinhole
//! camera model.
//!
//! Twists are ordered `(rho, phi)`: translational part first, rotational part
//! second. Pose updates are left-multiplicative, `xi ⊕ T = exp(xi^) · T`, so a
//! perturbation acts on the output side of the transform.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x6, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Below this rotation angle exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Minimum camera-frame depth accepted by [`project`].
pub const DEFAULT_MIN_DEPTH: f64 = 1e-6;

/// Rotation angles this close to π are rejected by [`log_pose`].
const ANGLE_AT_PI_TOLERANCE: f64 = 1e-9;

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
#[rustfmt::skip]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

fn vee_so3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Element of se(3): translational part `rho` (meters) and rotational part
/// `phi` (axis-angle, radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: v.fixed_rows::<3>(0).into_owned(),
            phi: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rho);
        v.fixed_rows_mut::<3>(3).copy_from(&self.phi);
        v
    }

    /// 4×4 matrix form `xi^`.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.phi));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.rho);
        m
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from parts without checking orthonormality.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Replaces the rotation by the nearest orthonormal matrix (polar
    /// decomposition through the SVD).
    pub fn renormalized(&self) -> Pose {
        Pose {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Largest element of `RᵀR − I` together with `|det R − 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
        gram.max((r.determinant() - 1.0).abs())
    }
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let sin = vee_so3(r).norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

/// Orthonormal matrix with determinant +1 closest to `m` in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// Composes a chain of poses left to right, re-orthonormalizing the running
/// rotation every `RENORMALIZE_EVERY` compositions.
pub fn compose_chain<'a, I>(poses: I) -> Pose
where
    I: IntoIterator<Item = &'a Pose>,
{
    let mut acc = Pose::identity();
    for (i, p) in poses.into_iter().enumerate() {
        acc = acc.compose(p);
        if (i + 1) % RENORMALIZE_EVERY == 0 {
            acc = acc.renormalized();
        }
    }
    acc
}

/// Number of compositions between rotation re-orthonormalizations.
pub const RENORMALIZE_EVERY: usize = 100;

/// `1 − cos θ` without cancellation for small angles.
fn one_minus_cos(theta: f64) -> f64 {
    let s = (0.5 * theta).sin();
    2.0 * s * s
}

/// SO(3) exponential (Rodrigues).
pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let w = skew(phi);
    let w2 = w * w;
    if theta2.sqrt() < SMALL_ANGLE {
        Matrix3::identity() + w + 0.5 * w2
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity() + (theta.sin() / theta) * w + (one_minus_cos(theta) / theta2) * w2
    }
}

/// Left Jacobian of SO(3), the `V` matrix mapping `rho` to the translation.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let w = skew(phi);
    let w2 = w * w;
    if theta2.sqrt() < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * w + (1.0 / 6.0) * w2
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity()
            + (one_minus_cos(theta) / theta2) * w
            + ((theta - theta.sin()) / (theta2 * theta)) * w2
    }
}

fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let w = skew(phi);
    let w2 = w * w;
    let coef = if theta2.sqrt() < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    Matrix3::identity() - 0.5 * w + coef * w2
}

/// SO(3) logarithm. Accurate up to (but excluding) angles of exactly π.
fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let skew_part = vee_so3(r);
    let sin = skew_part.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    if (std::f64::consts::PI - theta).abs() < ANGLE_AT_PI_TOLERANCE {
        return Err(GeometryError::AngleAtPi);
    }
    if theta < SMALL_ANGLE {
        // sin θ / θ ≈ 1 − θ²/6
        return Ok(skew_part * (1.0 + theta * theta / 6.0));
    }
    if cos > -0.5 {
        return Ok(skew_part * (theta / sin));
    }
    // Near π the skew part loses precision; recover the axis from the
    // symmetric part and take only its sign from the skew part.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let scale = 1.0 - cos;
    let diag = Vector3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]) / scale;
    let k = diag.imax();
    let mut axis = sym.column(k).into_owned() / scale;
    axis /= axis.norm();
    if axis.dot(&skew_part) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// `exp(xi^)`.
pub fn exp_twist(xi: &Twist) -> Pose {
    Pose {
        rotation: exp_so3(&xi.phi),
        translation: so3_left_jacobian(&xi.phi) * xi.rho,
    }
}

/// Left-multiplicative update `xi ⊕ T = exp(xi^) · T`.
pub fn apply_twist(xi: &Twist, pose: &Pose) -> Pose {
    exp_twist(xi).compose(pose)
}

/// Inverse of [`exp_twist`]. Fails for rotations within 1e-9 rad of π, where
/// the axis is ambiguous.
pub fn log_pose(pose: &Pose) -> Result<Twist, GeometryError> {
    let phi = log_so3(&pose.rotation)?;
    Ok(Twist {
        rho: so3_left_jacobian_inverse(&phi) * pose.translation,
        phi,
    })
}

pub fn transform_point(pose: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(p)
}

/// Derivative of `exp(xi) · (T p)` with respect to `xi` at `xi = 0`:
/// `[I₃ | −(T p)^]`.
pub fn pose_point_jacobian(pose: &Pose, p: &Vector3<f64>) -> Matrix3x6<f64> {
    let q = pose.transform_point(p);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&q)));
    j
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
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

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics)
        }
    }

    /// True when `px` lies inside the level-0 image.
    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    /// Unit-depth bearing `K⁻¹ [u v 1]ᵀ`.
    pub fn back_project(&self, px: &Pixel) -> Vector3<f64> {
        Vector3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }
}

/// Continuous image coordinates plus the pyramid level the feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    pub level: u8,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v, level: 0 }
    }

    pub fn with_level(u: f64, v: f64, level: u8) -> Self {
        Self { u, v, level }
    }
}

pub fn project(k: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Result<Pixel, GeometryError> {
    if p_cam.z <= DEFAULT_MIN_DEPTH {
        return Err(GeometryError::BehindCamera);
    }
    Ok(Pixel::new(
        k.fx * p_cam.x / p_cam.z + k.cx,
        k.fy * p_cam.y / p_cam.z + k.cy,
    ))
}

/// Jacobian of [`project`] with respect to the camera-frame point.
pub fn project_jacobian(k: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Result<Matrix2x3<f64>, GeometryError> {
    if p_cam.z <= DEFAULT_MIN_DEPTH {
        return Err(GeometryError::BehindCamera);
    }
    let iz = 1.0 / p_cam.z;
    let iz2 = iz * iz;
    Ok(Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p_cam.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p_cam.y * iz2,
    ))
}
