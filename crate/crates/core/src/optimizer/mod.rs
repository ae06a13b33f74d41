//! Levenberg–Marquardt optimization against the prior map.
//!
//! Three entry points share one solver core:
//!
//! * [`refine_pose`] aligns a keyframe's local structure with the map by
//!   minimizing robustified SDF residuals over a 6-DoF twist;
//! * [`refine_structure`] moves landmarks with poses frozen, balancing
//!   reprojection and SDF energy through λ;
//! * [`joint_optimize`] refines poses and landmarks together in two rounds
//!   separated by χ² outlier rejection.

mod linear;
mod lm;
mod outliers;
mod pose;
mod problem;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::SolverError;
use crate::factors::{LandmarkId, DEFAULT_HUBER_DELTA};

pub use linear::{lm_step, NormalEquations, Step};
pub use lm::{joint_optimize, refine_structure};
pub use outliers::{classify_outliers, OutlierDecision, ResidualSet};
pub use pose::refine_pose;
pub use problem::{GaugeMode, Keyframe, Landmark, Membership, Problem};

/// 95% quantile of χ² with one degree of freedom.
pub const CHI2_SDF: f64 = 3.841;
/// 95% quantile of χ² with two degrees of freedom.
pub const CHI2_REPRO: f64 = 5.991;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Initial damping β added to the diagonal of `JᵀΩ⁻¹J`.
    pub beta0: f64,
    pub beta_up: f64,
    pub beta_down: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Stop when the relative energy decrease of an accepted step falls below this.
    pub energy_tolerance: f64,
    pub step_tolerance: f64,
    pub th_sdf: f64,
    pub th_repro: f64,
    pub huber_delta: f64,
    /// Coupling factor between SDF and reprojection energy.
    pub lambda: f64,
    /// Number of most recent keyframes optimized jointly; `None` means all.
    pub window: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            beta0: 1e-4,
            beta_up: 10.0,
            beta_down: 0.5,
            beta_min: 1e-12,
            beta_max: 1e6,
            energy_tolerance: 1e-8,
            step_tolerance: 1e-10,
            th_sdf: CHI2_SDF,
            th_repro: CHI2_REPRO,
            huber_delta: DEFAULT_HUBER_DELTA,
            lambda: 1.0,
            window: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("beta0", self.beta0),
            ("beta_up", self.beta_up),
            ("beta_down", self.beta_down),
            ("beta_min", self.beta_min),
            ("beta_max", self.beta_max),
            ("energy_tolerance", self.energy_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("th_sdf", self.th_sdf),
            ("th_repro", self.th_repro),
            ("huber_delta", self.huber_delta),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SolverError::Config(format!("{name} must be positive")));
            }
        }
        if self.max_iterations == 0 {
            return Err(SolverError::Config("max_iterations must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SolverError::Config("lambda must be non-negative".into()));
        }
        if self.beta_up <= 1.0 || self.beta_down >= 1.0 || self.beta_min > self.beta_max {
            return Err(SolverError::Config("inconsistent damping schedule".into()));
        }
        if self.window == Some(0) {
            return Err(SolverError::Config("window must be at least 1".into()));
        }
        Ok(())
    }

    /// Overrides fields from recognized keys; unknown keys are left for the
    /// caller to report.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), SolverError> {
        let bad = |e: String| SolverError::Config(e);
        if let Some(v) = kv.get_parsed("max_iterations").map_err(bad)? {
            self.max_iterations = v;
        }
        macro_rules! float_keys {
            ($($key:literal => $field:ident),* $(,)?) => {$(
                if let Some(v) = kv.get_parsed::<f64>($key).map_err(bad)? {
                    self.$field = v;
                }
            )*};
        }
        float_keys! {
            "lambda" => lambda,
            "beta0" => beta0,
            "beta_up" => beta_up,
            "beta_down" => beta_down,
            "beta_min" => beta_min,
            "beta_max" => beta_max,
            "energy_tolerance" => energy_tolerance,
            "step_tolerance" => step_tolerance,
            "th_sdf" => th_sdf,
            "th_repro" => th_repro,
            "huber_delta" => huber_delta,
        }
        if let Some(v) = kv.get("window") {
            self.window = match v {
                "all" => None,
                s => Some(s.parse().map_err(|_| SolverError::Config(format!("window: not an integer: {s}")))?),
            };
        }
        self.validate()
    }

    pub const KEYS: &'static [&'static str] = &[
        "max_iterations",
        "lambda",
        "beta0",
        "beta_up",
        "beta_down",
        "beta_min",
        "beta_max",
        "energy_tolerance",
        "step_tolerance",
        "th_sdf",
        "th_repro",
        "huber_delta",
        "window",
    ];

    /// Reads a `key = value` file; every key must be a solver key.
    pub fn load(path: &Path) -> Result<Self, SolverError> {
        let text = std::fs::read_to_string(path).map_err(|e| SolverError::Config(format!("{}: {e}", path.display())))?;
        let kv = KeyValues::parse(&text).map_err(SolverError::Config)?;
        if let Some(k) = kv.unknown_keys(Self::KEYS).first() {
            return Err(SolverError::Config(format!("unknown key '{k}'")));
        }
        let mut cfg = Self::default();
        cfg.apply(&kv)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// Relative energy decrease below tolerance.
    EnergyConverged,
    /// Step norm below tolerance.
    StepConverged,
    /// No damped step decreases the energy; the iterate is stationary to
    /// working precision.
    DampingExhausted,
    MaxIterations,
    /// Linear system singular even at maximal damping.
    Singular,
    /// Nothing to optimize.
    Empty,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations | Termination::Singular)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub repro: f64,
    /// SDF energy before multiplication by λ.
    pub sdf: f64,
    pub lambda: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.repro + self.lambda * self.sdf
    }
}

/// Summary of one LM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub iterations: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Energy after each accepted step, preceded by the initial energy.
    pub accepted_energies: Vec<f64>,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub breakdown: EnergyBreakdown,
    pub outliers_removed: Vec<LandmarkId>,
    pub sdf_deactivated: Vec<LandmarkId>,
    /// Landmarks moved from the map-constrained set to the vision-only set.
    pub migrated: Vec<LandmarkId>,
    /// Underconstrained landmarks left untouched.
    pub skipped: Vec<LandmarkId>,
    pub rounds: Vec<RoundReport>,
    pub termination: Termination,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.termination.converged()
    }

    /// Converts an unconverged report into [`SolverError::NotConverged`].
    pub fn into_result(self) -> Result<Self, SolverError> {
        if self.converged() {
            Ok(self)
        } else {
            Err(SolverError::NotConverged {
                iterations: self.iterations,
            })
        }
    }

    /// Accepted energies of every round, concatenated.
    pub fn energy_trace(&self) -> impl Iterator<Item = f64> + '_ {
        self.rounds.iter().flat_map(|r| r.accepted_energies.iter().copied())
    }
}
