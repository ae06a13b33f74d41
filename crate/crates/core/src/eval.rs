//! Trajectory and structure accuracy metrics.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::geometry::Pose;
use crate::scene::{union_distance, Primitive};
use crate::trajectory::Trajectory;

/// Largest timestamp difference (s) for two frames to be associated.
pub const MAX_TIME_DIFFERENCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Alignment {
    /// Compare in the shared map frame.
    #[default]
    None,
    Rigid,
    Similarity,
}

impl FromStr for Alignment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "rigid" => Ok(Self::Rigid),
            "similarity" => Ok(Self::Similarity),
            other => Err(format!("unknown alignment '{other}' (none, rigid, similarity)")),
        }
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Rigid => "rigid",
            Self::Similarity => "similarity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub timestamp: f64,
    /// Position error (m).
    pub translation: f64,
    /// Rotation error (deg).
    pub rotation_deg: f64,
}

/// `p ↦ s R p + t`, applied to the estimate before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, pose: &Pose) -> Pose {
        Pose::from_parts(
            self.rotation * pose.rotation,
            self.scale * self.rotation * pose.translation + self.translation,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub translation_rmse: f64,
    pub rotation_rmse_deg: f64,
    pub frames: Vec<FrameError>,
    pub alignment: SimilarityTransform,
}

pub fn rmse(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Pairs each estimated frame with the nearest ground-truth timestamp within
/// [`MAX_TIME_DIFFERENCE`].
pub fn associate(estimated: &Trajectory, ground_truth: &Trajectory) -> Vec<(usize, usize)> {
    let gt = ground_truth.timestamps();
    let mut pairs = Vec::new();
    for (i, &t) in estimated.timestamps().iter().enumerate() {
        let j = gt.partition_point(|&g| g < t);
        let best = [j.checked_sub(1), (j < gt.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt[a] - t).abs().total_cmp(&(gt[b] - t).abs()));
        if let Some(j) = best {
            if (gt[j] - t).abs() <= MAX_TIME_DIFFERENCE {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Closed-form least-squares alignment `dst ≈ s R src + t`; the scale is
/// fixed to one unless `with_scale`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> SimilarityTransform {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
        var_s += (s - mu_s).norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = if with_scale && var_s > 0.0 {
        (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s
    } else {
        1.0
    };
    SimilarityTransform {
        scale,
        rotation,
        translation: mu_d - scale * rotation * mu_s,
    }
}

/// Absolute trajectory error over time-associated frames.
pub fn compute_ate(estimated: &Trajectory, ground_truth: &Trajectory, mode: Alignment) -> Result<AteResult, PipelineError> {
    let pairs = associate(estimated, ground_truth);
    if pairs.len() < 2 {
        return Err(PipelineError::AssociationFailure);
    }
    let alignment = match mode {
        Alignment::None => SimilarityTransform::identity(),
        Alignment::Rigid | Alignment::Similarity => {
            let src: Vec<_> = pairs.iter().map(|&(i, _)| estimated.pose(i).translation).collect();
            let dst: Vec<_> = pairs.iter().map(|&(_, j)| ground_truth.pose(j).translation).collect();
            umeyama(&src, &dst, mode == Alignment::Similarity)
        }
    };
    let frames: Vec<FrameError> = pairs
        .iter()
        .map(|&(i, j)| {
            let est = alignment.apply(estimated.pose(i));
            let gt = ground_truth.pose(j);
            let rel = Pose::from_parts(gt.rotation.transpose() * est.rotation, Vector3::zeros());
            FrameError {
                timestamp: estimated.timestamps()[i],
                translation: (est.translation - gt.translation).norm(),
                rotation_deg: rel.rotation_angle().to_degrees(),
            }
        })
        .collect();
    Ok(AteResult {
        translation_rmse: rmse(frames.iter().map(|f| f.translation)),
        rotation_rmse_deg: rmse(frames.iter().map(|f| f.rotation_deg)),
        frames,
        alignment,
    })
}

/// Ratio of estimated to true path length over associated frames.
pub fn path_scale(estimated: &Trajectory, ground_truth: &Trajectory) -> Option<f64> {
    let pairs = associate(estimated, ground_truth);
    let (mut est, mut gt) = (0.0, 0.0);
    for w in pairs.windows(2) {
        est += (estimated.pose(w[1].0).translation - estimated.pose(w[0].0).translation).norm();
        gt += (ground_truth.pose(w[1].1).translation - ground_truth.pose(w[0].1).translation).norm();
    }
    (gt > 0.0).then(|| est / gt)
}

/// Reference geometry for structure accuracy.
#[derive(Debug, Clone, Copy)]
pub enum StructureReference<'a> {
    /// Exact distance to the analytic surface.
    Scene(&'a [Primitive]),
    /// Distance to the nearest reference point.
    Points(&'a [Vector3<f64>]),
}

/// RMSE of per-landmark distances to the reference; zero for no landmarks.
pub fn compute_structure_rmse(landmarks: &[Vector3<f64>], reference: StructureReference<'_>) -> f64 {
    rmse(landmarks.iter().map(|p| match reference {
        StructureReference::Scene(prims) => union_distance(prims, p).abs(),
        StructureReference::Points(points) => points
            .iter()
            .map(|q| (q - p).norm())
            .fold(f64::INFINITY, f64::min),
    }))
}
