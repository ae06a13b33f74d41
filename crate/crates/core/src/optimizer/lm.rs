use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use nalgebra::{SMatrix, SVector, Vector3};

use crate::error::SolverError;
use crate::factors::{reprojection_jacobians, reprojection_residual, sdf_jacobians, KeyframeId, LandmarkId, RobustLoss};
use crate::geometry::{apply_twist, Pose, Twist};

use super::linear::{NormalEquations, Step};
use super::outliers::classify_outliers;
use super::problem::{Evaluation, GaugeMode, Problem};
use super::{RoundReport, SolveReport, SolverConfig, Termination};

/// Mapping from free variables to block indices of the normal equations.
#[derive(Debug, Default)]
struct Layout {
    poses: Vec<KeyframeId>,
    points: Vec<LandmarkId>,
    pose_index: BTreeMap<KeyframeId, usize>,
    point_index: BTreeMap<LandmarkId, usize>,
}

impl Layout {
    fn new(poses: Vec<KeyframeId>, points: Vec<LandmarkId>) -> Self {
        let pose_index = poses.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let point_index = points.iter().enumerate().map(|(i, l)| (*l, i)).collect();
        Self {
            poses,
            points,
            pose_index,
            point_index,
        }
    }

    fn is_empty(&self) -> bool {
        self.poses.is_empty() && self.points.is_empty()
    }
}

struct Snapshot {
    poses: Vec<Pose>,
    points: Vec<Vector3<f64>>,
}

fn snapshot(problem: &Problem, layout: &Layout) -> Snapshot {
    Snapshot {
        poses: layout.poses.iter().map(|k| problem.keyframes()[k].pose).collect(),
        points: layout.points.iter().map(|l| problem.landmarks()[l].position).collect(),
    }
}

fn restore(problem: &mut Problem, layout: &Layout, snap: &Snapshot) {
    for (k, p) in layout.poses.iter().zip(&snap.poses) {
        problem.set_keyframe_pose(*k, *p);
    }
    for (l, p) in layout.points.iter().zip(&snap.points) {
        problem.set_landmark_position(*l, *p);
    }
}

fn apply_step(problem: &mut Problem, layout: &Layout, step: &Step) {
    for (k, d) in layout.poses.iter().zip(&step.poses) {
        let pose = problem.keyframes()[k].pose;
        problem.set_keyframe_pose(*k, apply_twist(&Twist::from_vector(d), &pose));
    }
    for (l, d) in layout.points.iter().zip(&step.points) {
        let p = problem.landmarks()[l].position;
        problem.set_landmark_position(*l, p + d);
    }
}

/// Gauss-Newton system at the current state with IRLS Huber weights.
/// Reprojection factors listed in `skip` are left out for this iteration.
fn linearize(problem: &Problem, layout: &Layout, skip: &BTreeSet<usize>) -> NormalEquations {
    let mut ne = NormalEquations::new(layout.poses.len(), layout.points.len());
    let loss: RobustLoss = problem.loss;
    for (i, f) in problem.repro_factors().iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        let pose_slot = layout.pose_index.get(&f.keyframe).copied();
        let point_slot = layout.point_index.get(&f.landmark).copied();
        if pose_slot.is_none() && point_slot.is_none() {
            continue;
        }
        let pose = &problem.keyframes()[&f.keyframe].pose;
        let p = &problem.landmarks()[&f.landmark].position;
        let (Ok(r), Ok((jp, jt))) = (
            reprojection_residual(problem.camera(), pose, p, &f.measurement),
            reprojection_jacobians(problem.camera(), pose, p),
        ) else {
            continue;
        };
        let w = f.weight * loss.weight(f.weight.sqrt() * r.norm());
        ne.add_residual::<2>(pose_slot.map(|i| (i, &jt)), point_slot.map(|l| (l, &jp)), &r, w);
    }
    for f in problem.sdf_in_use() {
        let Some(&slot) = layout.point_index.get(&f.landmark) else {
            continue;
        };
        let p = problem.landmarks()[&f.landmark].position;
        let Ok(q) = problem.map().interpolate(&p) else {
            continue;
        };
        let (j_point, _) = sdf_jacobians(problem.map(), &p, &Pose::identity()).expect("observed query");
        let r = SVector::<f64, 1>::new(q.distance);
        let w = problem.lambda * f.weight * loss.weight(f.weight.sqrt() * q.distance.abs());
        let j: SMatrix<f64, 1, 3> = j_point;
        ne.add_residual::<1>(None, Some((slot, &j)), &r, w);
    }
    ne
}

/// Bookkeeping shared by the rounds of one solve.
#[derive(Default)]
struct SolveLog {
    migrated: Vec<LandmarkId>,
    behind: BTreeSet<LandmarkId>,
}

fn migrate(problem: &mut Problem, ids: &BTreeSet<LandmarkId>, log: &mut SolveLog) {
    for &id in ids {
        debug!("landmark {id}: SDF query unobserved, moving to vision-only set");
        problem.migrate_to_vision_only(id);
        log.migrated.push(id);
    }
}

fn flag_behind(problem: &Problem, factors: &BTreeSet<usize>, log: &mut SolveLog) {
    for &i in factors {
        log.behind.insert(problem.repro_factors()[i].landmark);
    }
}

/// One Levenberg–Marquardt round over the variables in `layout`.
///
/// Factors that cannot be evaluated at a trial state (behind the camera,
/// unobserved SDF query) are excluded from both sides of the acceptance test.
/// Unobserved SDF queries at an accepted state migrate the landmark to `N`
/// for the rest of the solve.
fn run_lm(problem: &mut Problem, layout: &Layout, config: &SolverConfig, log: &mut SolveLog) -> RoundReport {
    let mut current = problem.evaluate();
    let unobserved = current.unobserved();
    if !unobserved.is_empty() {
        migrate(problem, &unobserved, log);
        current = problem.evaluate();
    }
    let mut skip = current.behind();
    flag_behind(problem, &skip, log);

    let initial_energy = current.total();
    let mut report = RoundReport {
        iterations: 0,
        initial_energy,
        final_energy: initial_energy,
        accepted_energies: vec![initial_energy],
        termination: Termination::MaxIterations,
    };
    if layout.is_empty() {
        report.termination = Termination::Empty;
        return report;
    }

    let mut beta = config.beta0;
    'outer: for iter in 0..config.max_iterations {
        report.iterations = iter + 1;
        let system = linearize(problem, layout, &skip);
        loop {
            let step = match system.solve_schur(beta) {
                Ok(s) => s,
                Err(_) => {
                    beta *= config.beta_up;
                    if beta > config.beta_max {
                        report.termination = Termination::Singular;
                        break 'outer;
                    }
                    continue;
                }
            };
            if step.norm() < config.step_tolerance {
                report.termination = Termination::StepConverged;
                break 'outer;
            }
            let snap = snapshot(problem, layout);
            apply_step(problem, layout, &step);
            let trial: Evaluation = problem.evaluate();
            let trial_behind = trial.behind();
            let trial_unobserved = trial.unobserved();
            let current_cmp = current.total_excluding(&trial_behind, &trial_unobserved);
            let trial_cmp = trial.total_excluding(&skip, &BTreeSet::new());

            if trial_cmp < current_cmp {
                beta = (beta * config.beta_down).max(config.beta_min);
                if !trial_unobserved.is_empty() {
                    migrate(problem, &trial_unobserved, log);
                    current = problem.evaluate();
                } else {
                    current = trial;
                }
                skip = trial_behind;
                flag_behind(problem, &skip, log);
                let energy = current.total();
                report.accepted_energies.push(energy);
                report.final_energy = energy;
                let rel = (current_cmp - trial_cmp) / current_cmp.max(f64::MIN_POSITIVE);
                if rel < config.energy_tolerance {
                    report.termination = Termination::EnergyConverged;
                    break 'outer;
                }
                continue 'outer;
            }
            restore(problem, layout, &snap);
            beta *= config.beta_up;
            if beta > config.beta_max {
                report.termination = Termination::DampingExhausted;
                break 'outer;
            }
        }
    }
    report.final_energy = current.total();
    report
}

/// A landmark can be solved for when it has at least two visual factors, or
/// one visual factor and an SDF factor that is in use.
fn constrained(problem: &Problem, id: LandmarkId, usable_keyframes: Option<&BTreeSet<KeyframeId>>) -> bool {
    let lm = &problem.landmarks()[&id];
    let views = match usable_keyframes {
        Some(set) => lm.observations.intersection(set).count(),
        None => lm.observations.len(),
    };
    let sdf = problem.lambda > 0.0 && problem.sdf_factors().get(&id).is_some_and(|f| f.active);
    views >= 2 || (views >= 1 && sdf)
}

fn merge_report(rounds: Vec<RoundReport>, problem: &Problem, log: SolveLog, skipped: Vec<LandmarkId>) -> SolveReport {
    let last = rounds.last().expect("at least one round");
    SolveReport {
        iterations: rounds.iter().map(|r| r.iterations).sum(),
        initial_energy: rounds[0].initial_energy,
        final_energy: last.final_energy,
        breakdown: problem.energy(),
        outliers_removed: Vec::new(),
        sdf_deactivated: Vec::new(),
        migrated: log.migrated,
        skipped,
        termination: last.termination,
        rounds,
    }
}

/// Refines landmark positions with all keyframe poses held fixed, minimizing
/// `E_repro + λ E_sdf`. Underconstrained landmarks are skipped and reported.
pub fn refine_structure(problem: &mut Problem, config: &SolverConfig) -> Result<SolveReport, SolverError> {
    config.validate()?;
    problem.validate()?;
    let (points, skipped): (Vec<_>, Vec<_>) = problem
        .landmarks()
        .keys()
        .copied()
        .partition(|&id| constrained(problem, id, None));
    let layout = Layout::new(Vec::new(), points);
    let mut log = SolveLog::default();
    let round = run_lm(problem, &layout, config, &mut log);
    Ok(merge_report(vec![round], problem, log, skipped))
}

/// Jointly refines non-fixed keyframe poses and landmark positions.
///
/// Round one converges with Huber losses; the χ² classification then
/// deactivates SDF factors that disagree with the map and removes landmarks
/// whose visual factors disagree; round two re-optimizes, and a final
/// classification dismisses the remaining outliers (including landmarks that
/// ended behind an observing camera).
pub fn joint_optimize(problem: &mut Problem, config: &SolverConfig) -> Result<SolveReport, SolverError> {
    config.validate()?;
    problem.validate()?;
    if problem.keyframes().len() < 2 {
        return Err(SolverError::DegenerateProblem(
            "joint optimization needs at least two keyframes".into(),
        ));
    }
    let any_fixed = problem.keyframes().values().any(|k| k.fixed);
    let mut fixed: BTreeSet<KeyframeId> = problem
        .keyframes()
        .iter()
        .filter(|(_, k)| k.fixed)
        .map(|(id, _)| *id)
        .collect();
    if !any_fixed {
        match problem.gauge {
            GaugeMode::FixOldest => {
                fixed.insert(*problem.keyframes().keys().next().expect("non-empty"));
            }
            GaugeMode::SdfAnchored => {
                if problem.sdf_in_use().next().is_none() {
                    return Err(SolverError::GaugeUnfixed);
                }
            }
        }
    }

    let layout_for = |problem: &Problem| {
        let poses: Vec<KeyframeId> = problem
            .keyframes()
            .keys()
            .filter(|k| !fixed.contains(k))
            .copied()
            .collect();
        let (points, skipped): (Vec<_>, Vec<_>) = problem
            .landmarks()
            .keys()
            .copied()
            .partition(|&id| constrained(problem, id, None));
        (Layout::new(poses, points), skipped)
    };

    let mut log = SolveLog::default();
    let (layout, _) = layout_for(problem);
    let first = run_lm(problem, &layout, config, &mut log);

    let decision = classify_outliers(problem, &problem.residuals(), config);
    debug!(
        "round 1: {} outliers, {} SDF factors deactivated",
        decision.outliers.len(),
        decision.deactivated.len()
    );
    decision.apply(problem);
    let mut outliers: BTreeSet<LandmarkId> = decision.outliers.into_iter().collect();
    let mut deactivated: BTreeSet<LandmarkId> = decision.deactivated.into_iter().collect();

    log.behind.clear();
    let (layout, skipped) = layout_for(problem);
    let second = run_lm(problem, &layout, config, &mut log);

    let mut last = classify_outliers(problem, &problem.residuals(), config);
    for id in &log.behind {
        if problem.landmarks().contains_key(id) && !last.outliers.contains(id) {
            last.outliers.push(*id);
        }
    }
    last.outliers.sort_unstable();
    last.apply(problem);
    outliers.extend(last.outliers);
    deactivated.extend(last.deactivated);

    let mut report = merge_report(vec![first, second], problem, log, skipped);
    report.final_energy = problem.energy().total();
    report.outliers_removed = outliers.into_iter().collect();
    report.sdf_deactivated = deactivated.into_iter().collect();
    Ok(report)
}

