//! Residual blocks for the two factor types, their analytic Jacobians, and
//! the Huber loss used to robustify both.
//!
//! Residuals are whitened by `sqrt(weight)` before the loss is applied, so a
//! whitened squared residual is directly comparable to a χ² quantile. The
//! coupling factor λ multiplies the SDF term's contribution to the energy.

use nalgebra::{Matrix1x3, Matrix1x6, Matrix2x3, Matrix2x6, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, MapError};
use crate::geometry::{pose_point_jacobian, project, project_jacobian, skew, CameraIntrinsics, Pixel, Pose};
use crate::sdf_map::SdfMap;

pub type LandmarkId = usize;
pub type KeyframeId = usize;

/// Huber δ in whitened units (95% asymptotic efficiency under Gaussian noise).
pub const DEFAULT_HUBER_DELTA: f64 = 1.345;

/// Huber loss on the whitened residual norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLoss {
    pub delta: f64,
}

impl Default for RobustLoss {
    fn default() -> Self {
        Self {
            delta: DEFAULT_HUBER_DELTA,
        }
    }
}

impl RobustLoss {
    pub fn new(delta: f64) -> Self {
        assert!(delta > 0.0, "huber delta must be positive");
        Self { delta }
    }

    /// Robustified squared norm: `n²` below δ, `2δn − δ²` above.
    pub fn cost(&self, whitened_norm: f64) -> f64 {
        if whitened_norm <= self.delta {
            whitened_norm * whitened_norm
        } else {
            2.0 * self.delta * whitened_norm - self.delta * self.delta
        }
    }

    /// IRLS attenuation, `ρ'(n²)`.
    pub fn weight(&self, whitened_norm: f64) -> f64 {
        robust_weight(self, whitened_norm)
    }
}

/// 1 below δ, `δ / n` above.
pub fn robust_weight(loss: &RobustLoss, whitened_norm: f64) -> f64 {
    debug_assert!(whitened_norm >= 0.0);
    if whitened_norm <= loss.delta {
        1.0
    } else {
        loss.delta / whitened_norm
    }
}

/// Distance constraint of a landmark against the prior map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdfFactor {
    pub landmark: LandmarkId,
    /// `1 / sigma_sdf²`.
    pub weight: f64,
    pub active: bool,
}

impl SdfFactor {
    pub fn new(landmark: LandmarkId, sigma_sdf: f64) -> Self {
        Self {
            landmark,
            weight: 1.0 / (sigma_sdf * sigma_sdf),
            active: true,
        }
    }
}

/// Pixel observation of a landmark in a keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionFactor {
    pub landmark: LandmarkId,
    pub keyframe: KeyframeId,
    pub measurement: Pixel,
    /// `1 / sigma_level²` with `sigma_level = 2^level` pixels.
    pub weight: f64,
}

impl ReprojectionFactor {
    pub fn new(landmark: LandmarkId, keyframe: KeyframeId, measurement: Pixel) -> Self {
        let sigma = f64::from(1u32 << measurement.level);
        Self {
            landmark,
            keyframe,
            measurement,
            weight: 1.0 / (sigma * sigma),
        }
    }
}

pub fn sdf_residual(map: &SdfMap, p_world: &Vector3<f64>) -> Result<f64, MapError> {
    map.interpolate(p_world).map(|q| q.distance)
}

/// Jacobians of `φ(exp(ξ) · T · p)`.
///
/// `point` is expressed in the source frame of `pose`; pass the identity to
/// differentiate a world-frame landmark directly. `J_point` is the map
/// gradient at the transformed point, `J_pose` its chain with the
/// left-perturbation Jacobian at `ξ = 0`.
pub fn sdf_jacobians(map: &SdfMap, point: &Vector3<f64>, pose: &Pose) -> Result<(Matrix1x3<f64>, Matrix1x6<f64>), MapError> {
    let q = map.interpolate(&pose.transform_point(point))?;
    let j_point = q.gradient.transpose();
    let j_pose = j_point * pose_point_jacobian(pose, point);
    Ok((j_point, j_pose))
}

/// `u_meas − π(T p_world)`, where `pose` maps world points into the camera.
pub fn reprojection_residual(
    k: &CameraIntrinsics,
    pose: &Pose,
    p_world: &Vector3<f64>,
    measured: &Pixel,
) -> Result<Vector2<f64>, GeometryError> {
    let px = project(k, &pose.transform_point(p_world))?;
    Ok(Vector2::new(measured.u - px.u, measured.v - px.v))
}

/// Jacobians of [`reprojection_residual`] with respect to the world point and
/// a left perturbation of `pose`.
pub fn reprojection_jacobians(
    k: &CameraIntrinsics,
    pose: &Pose,
    p_world: &Vector3<f64>,
) -> Result<(Matrix2x3<f64>, Matrix2x6<f64>), GeometryError> {
    let p_cam = pose.transform_point(p_world);
    let jp = -project_jacobian(k, &p_cam)?;
    let j_point = jp * pose.rotation;
    let mut j_pose = Matrix2x6::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp);
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * -skew(&p_cam)));
    Ok((j_point, j_pose))
}
