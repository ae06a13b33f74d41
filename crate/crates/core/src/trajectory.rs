//! Timestamped camera trajectories and the text format
//! `timestamp tx ty tz qx qy qz qw` (one frame per line, quaternion w-last).
//!
//! Poses map camera coordinates into the world (map) frame.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::geometry::Pose;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<Pose>,
}

impl Trajectory {
    /// Fails unless timestamps are finite and strictly increasing.
    pub fn new(timestamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self, SimError> {
        if timestamps.len() != poses.len() {
            return Err(SimError::InvalidTrajectory(format!(
                "{} timestamps for {} poses",
                timestamps.len(),
                poses.len()
            )));
        }
        if timestamps.iter().any(|t| !t.is_finite()) {
            return Err(SimError::InvalidTrajectory("non-finite timestamp".into()));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(SimError::InvalidTrajectory(format!(
                "timestamps not strictly increasing at frame {}",
                i + 1
            )));
        }
        Ok(Self { timestamps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn pose(&self, i: usize) -> &Pose {
        &self.poses[i]
    }

    /// Same timestamps, new poses.
    pub fn with_poses(&self, poses: Vec<Pose>) -> Result<Self, SimError> {
        Self::new(self.timestamps.clone(), poses)
    }

    /// Keeps every `k`-th frame starting with the first.
    pub fn subsample(&self, k: usize) -> Self {
        let k = k.max(1);
        Self {
            timestamps: self.timestamps.iter().step_by(k).copied().collect(),
            poses: self.poses.iter().step_by(k).copied().collect(),
        }
    }

    /// Motion from frame `i - 1` to frame `i`, expressed in frame `i - 1`.
    pub fn relative(&self, i: usize) -> Pose {
        self.poses[i - 1].inverse().compose(&self.poses[i])
    }

    /// Checks that no inter-frame motion exceeds the given translation (m)
    /// and rotation (rad).
    pub fn check_velocity(&self, max_translation: f64, max_rotation: f64) -> Result<(), SimError> {
        for i in 1..self.len() {
            let d = self.relative(i);
            let (t, r) = (d.translation.norm(), d.rotation_angle());
            if t > max_translation || r > max_rotation {
                return Err(SimError::InvalidTrajectory(format!(
                    "frame {i} moves {t:.4} m / {:.3} deg",
                    r.to_degrees()
                )));
            }
        }
        Ok(())
    }

    /// Camera circling `target` at `radius` and `height`, always facing it.
    /// Covers `turns` full revolutions over `frames` frames spaced `dt` apart.
    pub fn orbit(frames: usize, radius: f64, height: f64, target: Vector3<f64>, turns: f64, dt: f64) -> Self {
        let mut timestamps = Vec::with_capacity(frames);
        let mut poses = Vec::with_capacity(frames);
        for i in 0..frames {
            let a = std::f64::consts::TAU * turns * i as f64 / frames as f64;
            // Slight vertical bob keeps the motion from being planar.
            let eye = Vector3::new(
                target.x + radius * a.cos(),
                target.y + radius * a.sin(),
                height + 0.1 * (3.0 * a).sin(),
            );
            timestamps.push(i as f64 * dt);
            poses.push(look_at(&eye, &target));
        }
        Self { timestamps, poses }
    }

    pub fn to_tum(&self) -> String {
        let mut s = String::new();
        for (t, p) in self.timestamps.iter().zip(&self.poses) {
            let q = p.quaternion();
            let c = p.translation;
            writeln!(
                s,
                "{t:.9} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                c.x, c.y, c.z, q.i, q.j, q.k, q.w
            )
            .expect("write to string");
        }
        s
    }

    pub fn parse_tum(text: &str) -> Result<Self, SimError> {
        let mut timestamps = Vec::new();
        let mut poses = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| SimError::InvalidTrajectory(format!("line {}: {e}", i + 1)))?;
            if v.len() != 8 {
                return Err(SimError::InvalidTrajectory(format!(
                    "line {}: expected 8 fields, found {}",
                    i + 1,
                    v.len()
                )));
            }
            let q = UnitQuaternion::from_quaternion(Quaternion::new(v[7], v[4], v[5], v[6]));
            timestamps.push(v[0]);
            poses.push(Pose::from_quaternion(&q, Vector3::new(v[1], v[2], v[3])));
        }
        Self::new(timestamps, poses)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_tum())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::parse_tum(&std::fs::read_to_string(path)?)
    }
}

/// Camera-to-world pose at `eye` looking at `target`, with image `y` pointing
/// down (world `z` is up).
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let mut x = z.cross(&Vector3::z());
    if x.norm() < 1e-9 {
        x = Vector3::x();
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Pose::from_parts(Matrix3::from_columns(&[x, y, z]), *eye)
}
