//! χ² outlier classification with the tolerant occlusion rule: a landmark
//! that disagrees with the map first loses its SDF factor; it is only
//! declared an outlier if its visual factors disagree afterwards.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::factors::{KeyframeId, LandmarkId};

use super::problem::Problem;
use super::SolverConfig;

/// Whitened squared residuals of the active factors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub sdf: BTreeMap<LandmarkId, f64>,
    pub repro: Vec<(LandmarkId, KeyframeId, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierDecision {
    pub outliers: Vec<LandmarkId>,
    pub deactivated: Vec<LandmarkId>,
}

/// Applies the two-threshold rule to `residuals`.
///
/// * An active SDF factor with `w e² > th_sdf` is deactivated; its landmark is
///   not judged on its visual factors in this pass.
/// * Any other landmark with a reprojection factor `w ‖e‖² > th_repro` is an
///   outlier.
///
/// Comparisons are strict, so a residual exactly at a threshold passes.
pub fn classify_outliers(problem: &Problem, residuals: &ResidualSet, config: &SolverConfig) -> OutlierDecision {
    let mut deactivated = BTreeSet::new();
    for (&id, &chi2) in &residuals.sdf {
        let active = problem.sdf_factors().get(&id).is_some_and(|f| f.active);
        if active && chi2 > config.th_sdf {
            deactivated.insert(id);
        }
    }
    let mut outliers = BTreeSet::new();
    for &(id, _, chi2) in &residuals.repro {
        if chi2 > config.th_repro && !deactivated.contains(&id) && problem.landmarks().contains_key(&id) {
            outliers.insert(id);
        }
    }
    OutlierDecision {
        outliers: outliers.into_iter().collect(),
        deactivated: deactivated.into_iter().collect(),
    }
}

impl OutlierDecision {
    pub fn is_empty(&self) -> bool {
        self.outliers.is_empty() && self.deactivated.is_empty()
    }

    pub(crate) fn apply(&self, problem: &mut Problem) {
        for &id in &self.deactivated {
            problem.deactivate_sdf(id);
        }
        for &id in &self.outliers {
            problem.remove_landmark(id);
        }
    }
}
