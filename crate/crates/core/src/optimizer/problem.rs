use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::factors::{
    reprojection_residual, sdf_residual, KeyframeId, LandmarkId, ReprojectionFactor, RobustLoss, SdfFactor,
};
use crate::geometry::{CameraIntrinsics, Pixel, Pose};
use crate::sdf_map::SdfMap;

use super::outliers::ResidualSet;
use super::EnergyBreakdown;

/// Which landmark set a point belongs to: constrained by the map (`M`) or by
/// multi-view geometry only (`N`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Membership {
    MapConstrained,
    VisionOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    /// World-to-camera transform.
    pub pose: Pose,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub membership: Membership,
    /// Keyframes with a reprojection factor on this landmark.
    pub observations: BTreeSet<KeyframeId>,
}

/// How the global frame is pinned during joint optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GaugeMode {
    /// Hold the keyframe with the smallest id fixed unless some keyframe is
    /// already fixed.
    #[default]
    FixOldest,
    /// Rely on SDF factors alone; keyframes are free unless marked fixed.
    SdfAnchored,
}

/// Joint state of landmarks and keyframe poses together with their factors.
#[derive(Debug, Clone)]
pub struct Problem {
    camera: CameraIntrinsics,
    map: Arc<SdfMap>,
    pub lambda: f64,
    pub loss: RobustLoss,
    pub gauge: GaugeMode,
    keyframes: BTreeMap<KeyframeId, Keyframe>,
    landmarks: BTreeMap<LandmarkId, Landmark>,
    sdf_factors: BTreeMap<LandmarkId, SdfFactor>,
    repro_factors: Vec<ReprojectionFactor>,
}

/// Per-factor robust costs at one state. `None` marks a factor that could not
/// be evaluated (point behind the camera, or SDF query unobserved).
#[derive(Debug, Clone, Default)]
pub(crate) struct Evaluation {
    pub repro: Vec<Option<f64>>,
    pub sdf: BTreeMap<LandmarkId, Option<f64>>,
    pub lambda: f64,
}

impl Evaluation {
    pub fn breakdown(&self) -> EnergyBreakdown {
        EnergyBreakdown {
            repro: self.repro.iter().flatten().sum(),
            sdf: self.sdf.values().flatten().sum(),
            lambda: self.lambda,
        }
    }

    pub fn total(&self) -> f64 {
        self.breakdown().total()
    }

    pub fn behind(&self) -> BTreeSet<usize> {
        self.repro
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.is_none().then_some(i))
            .collect()
    }

    pub fn unobserved(&self) -> BTreeSet<LandmarkId> {
        self.sdf
            .iter()
            .filter_map(|(l, c)| c.is_none().then_some(*l))
            .collect()
    }

    /// Total over factors that are evaluable here and not listed in the
    /// exclusion sets.
    pub fn total_excluding(&self, repro: &BTreeSet<usize>, sdf: &BTreeSet<LandmarkId>) -> f64 {
        let r: f64 = self
            .repro
            .iter()
            .enumerate()
            .filter(|(i, _)| !repro.contains(i))
            .filter_map(|(_, c)| *c)
            .sum();
        let s: f64 = self
            .sdf
            .iter()
            .filter(|(l, _)| !sdf.contains(l))
            .filter_map(|(_, c)| *c)
            .sum();
        r + self.lambda * s
    }
}

impl Problem {
    pub fn new(map: Arc<SdfMap>, camera: CameraIntrinsics, lambda: f64) -> Self {
        Self {
            camera,
            map,
            lambda,
            loss: RobustLoss::default(),
            gauge: GaugeMode::default(),
            keyframes: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            sdf_factors: BTreeMap::new(),
            repro_factors: Vec::new(),
        }
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.camera
    }

    pub fn map(&self) -> &SdfMap {
        &self.map
    }

    pub fn keyframes(&self) -> &BTreeMap<KeyframeId, Keyframe> {
        &self.keyframes
    }

    pub fn landmarks(&self) -> &BTreeMap<LandmarkId, Landmark> {
        &self.landmarks
    }

    pub fn sdf_factors(&self) -> &BTreeMap<LandmarkId, SdfFactor> {
        &self.sdf_factors
    }

    pub fn repro_factors(&self) -> &[ReprojectionFactor] {
        &self.repro_factors
    }

    pub fn add_keyframe(&mut self, id: KeyframeId, pose: Pose, fixed: bool) -> Result<(), SolverError> {
        if self.keyframes.contains_key(&id) {
            return Err(SolverError::InvalidProblem(format!("duplicate keyframe {id}")));
        }
        self.keyframes.insert(id, Keyframe { pose, fixed });
        Ok(())
    }

    /// Adds a landmark; map-constrained landmarks receive their SDF factor.
    pub fn add_landmark(&mut self, id: LandmarkId, position: Vector3<f64>, membership: Membership) -> Result<(), SolverError> {
        if self.landmarks.contains_key(&id) {
            return Err(SolverError::InvalidProblem(format!("duplicate landmark {id}")));
        }
        self.landmarks.insert(
            id,
            Landmark {
                position,
                membership,
                observations: BTreeSet::new(),
            },
        );
        if membership == Membership::MapConstrained {
            self.sdf_factors.insert(id, SdfFactor::new(id, self.map.sigma_sdf()));
        }
        Ok(())
    }

    pub fn add_observation(&mut self, landmark: LandmarkId, keyframe: KeyframeId, measurement: Pixel) -> Result<(), SolverError> {
        if !self.keyframes.contains_key(&keyframe) {
            return Err(SolverError::InvalidProblem(format!("unknown keyframe {keyframe}")));
        }
        let lm = self
            .landmarks
            .get_mut(&landmark)
            .ok_or_else(|| SolverError::InvalidProblem(format!("unknown landmark {landmark}")))?;
        if !lm.observations.insert(keyframe) {
            return Err(SolverError::InvalidProblem(format!(
                "landmark {landmark} already observed in keyframe {keyframe}"
            )));
        }
        self.repro_factors
            .push(ReprojectionFactor::new(landmark, keyframe, measurement));
        Ok(())
    }

    pub fn set_keyframe_pose(&mut self, id: KeyframeId, pose: Pose) {
        if let Some(k) = self.keyframes.get_mut(&id) {
            k.pose = pose;
        }
    }

    pub fn set_keyframe_fixed(&mut self, id: KeyframeId, fixed: bool) {
        if let Some(k) = self.keyframes.get_mut(&id) {
            k.fixed = fixed;
        }
    }

    pub fn set_landmark_position(&mut self, id: LandmarkId, position: Vector3<f64>) {
        if let Some(l) = self.landmarks.get_mut(&id) {
            l.position = position;
        }
    }

    /// Removes a landmark with every factor that references it.
    pub fn remove_landmark(&mut self, id: LandmarkId) -> bool {
        if self.landmarks.remove(&id).is_none() {
            return false;
        }
        self.sdf_factors.remove(&id);
        self.repro_factors.retain(|f| f.landmark != id);
        true
    }

    pub fn deactivate_sdf(&mut self, id: LandmarkId) {
        if let Some(f) = self.sdf_factors.get_mut(&id) {
            f.active = false;
        }
    }

    /// Moves a landmark from `M` to `N`, dropping its SDF factor.
    pub fn migrate_to_vision_only(&mut self, id: LandmarkId) {
        if let Some(l) = self.landmarks.get_mut(&id) {
            l.membership = Membership::VisionOnly;
        }
        self.sdf_factors.remove(&id);
    }

    /// Checks the structural invariants: one SDF factor per `M` landmark and
    /// none for `N`; observation lists agree with the reprojection factors.
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidProblem(m));
        for (id, lm) in &self.landmarks {
            let has = self.sdf_factors.contains_key(id);
            match (lm.membership, has) {
                (Membership::MapConstrained, false) => return bad(format!("landmark {id} in M lacks an SDF factor")),
                (Membership::VisionOnly, true) => return bad(format!("landmark {id} in N has an SDF factor")),
                _ => {}
            }
        }
        for id in self.sdf_factors.keys() {
            if !self.landmarks.contains_key(id) {
                return bad(format!("SDF factor for unknown landmark {id}"));
            }
        }
        let mut seen: BTreeMap<LandmarkId, BTreeSet<KeyframeId>> = BTreeMap::new();
        for f in &self.repro_factors {
            if !self.keyframes.contains_key(&f.keyframe) || !self.landmarks.contains_key(&f.landmark) {
                return bad(format!("factor ({}, {}) references a missing entity", f.landmark, f.keyframe));
            }
            if !seen.entry(f.landmark).or_default().insert(f.keyframe) {
                return bad(format!("duplicate factor ({}, {})", f.landmark, f.keyframe));
            }
        }
        for (id, lm) in &self.landmarks {
            let empty = BTreeSet::new();
            if &lm.observations != seen.get(id).unwrap_or(&empty) {
                return bad(format!("observation list of landmark {id} is out of sync"));
            }
        }
        Ok(())
    }

    /// Active SDF factors that currently contribute energy.
    pub(crate) fn sdf_in_use(&self) -> impl Iterator<Item = &SdfFactor> {
        let on = self.lambda > 0.0;
        self.sdf_factors.values().filter(move |f| on && f.active)
    }

    pub(crate) fn evaluate(&self) -> Evaluation {
        let repro = self
            .repro_factors
            .iter()
            .map(|f| {
                let pose = &self.keyframes[&f.keyframe].pose;
                let p = &self.landmarks[&f.landmark].position;
                reprojection_residual(&self.camera, pose, p, &f.measurement)
                    .ok()
                    .map(|r| self.loss.cost(f.weight.sqrt() * r.norm()))
            })
            .collect();
        let sdf = self
            .sdf_in_use()
            .map(|f| {
                let p = &self.landmarks[&f.landmark].position;
                let c = sdf_residual(&self.map, p)
                    .ok()
                    .map(|d| self.loss.cost(f.weight.sqrt() * d.abs()));
                (f.landmark, c)
            })
            .collect();
        Evaluation {
            repro,
            sdf,
            lambda: self.lambda,
        }
    }

    /// Robust energy `E_repro + λ E_sdf` over evaluable factors.
    pub fn energy(&self) -> EnergyBreakdown {
        self.evaluate().breakdown()
    }

    /// Whitened squared residuals (`w e²`, no robust loss and no λ) of every
    /// active factor, as consumed by the χ² tests.
    pub fn residuals(&self) -> ResidualSet {
        let mut set = ResidualSet::default();
        for f in self.sdf_factors.values().filter(|f| f.active) {
            if let Ok(d) = sdf_residual(&self.map, &self.landmarks[&f.landmark].position) {
                set.sdf.insert(f.landmark, f.weight * d * d);
            }
        }
        for f in &self.repro_factors {
            let pose = &self.keyframes[&f.keyframe].pose;
            let p = &self.landmarks[&f.landmark].position;
            let chi2 = match reprojection_residual(&self.camera, pose, p, &f.measurement) {
                Ok(r) => f.weight * r.norm_squared(),
                Err(_) => f64::INFINITY,
            };
            set.repro.push((f.landmark, f.keyframe, chi2));
        }
        set
    }
}
