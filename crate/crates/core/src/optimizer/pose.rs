use nalgebra::{Matrix6, Vector3, Vector6};

use crate::error::SolverError;
use crate::factors::{sdf_jacobians, RobustLoss};
use crate::geometry::{apply_twist, Pose, Twist};
use crate::sdf_map::SdfMap;

use super::{EnergyBreakdown, RoundReport, SolveReport, SolverConfig, Termination};

/// Fewer usable SDF factors than this leave the 6-DoF pose underdetermined.
const MIN_FACTORS: usize = 6;

/// Per-landmark robust SDF cost, `None` where the query is unobserved.
fn costs(map: &SdfMap, pose: &Pose, points: &[Vector3<f64>], weight: f64, loss: &RobustLoss) -> Vec<Option<f64>> {
    points
        .iter()
        .map(|p| {
            map.interpolate(&pose.transform_point(p))
                .ok()
                .map(|q| loss.cost(weight.sqrt() * q.distance.abs()))
        })
        .collect()
}

fn sum_where(costs: &[Option<f64>], keep: impl Fn(usize) -> bool) -> f64 {
    costs
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .filter_map(|(_, c)| *c)
        .sum()
}

/// Aligns local structure with the map: finds the pose minimizing
/// `Σ ρ(φ((ξ ⊕ T) pᵢ))` by Levenberg–Marquardt on the twist `ξ`.
///
/// `points` are expressed in the source frame of `initial`, which maps them
/// into the map frame. Each accepted step is folded into the pose, so the
/// twist restarts from zero at every iteration. The information of every
/// residual is `1 / σ_sdf²`.
///
/// An unconverged solve still returns the best pose; check
/// [`SolveReport::converged`] or use [`SolveReport::into_result`].
pub fn refine_pose(
    map: &SdfMap,
    initial: &Pose,
    points: &[Vector3<f64>],
    config: &SolverConfig,
) -> Result<(Pose, SolveReport), SolverError> {
    config.validate()?;
    let loss = RobustLoss::new(config.huber_delta);
    let weight = 1.0 / (map.sigma_sdf() * map.sigma_sdf());

    let mut pose = *initial;
    let mut current = costs(map, &pose, points, weight, &loss);
    let usable = current.iter().filter(|c| c.is_some()).count();
    if usable < MIN_FACTORS {
        return Err(SolverError::DegenerateProblem(format!(
            "{usable} observed SDF factors, need at least {MIN_FACTORS}"
        )));
    }
    let initial_energy = sum_where(&current, |_| true);
    let mut round = RoundReport {
        iterations: 0,
        initial_energy,
        final_energy: initial_energy,
        accepted_energies: vec![initial_energy],
        termination: Termination::MaxIterations,
    };

    let mut beta = config.beta0;
    'outer: for iter in 0..config.max_iterations {
        round.iterations = iter + 1;
        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for (p, c) in points.iter().zip(&current) {
            if c.is_none() {
                continue;
            }
            let Ok((_, j)) = sdf_jacobians(map, p, &pose) else {
                continue;
            };
            let r = map.interpolate(&pose.transform_point(p)).expect("observed").distance;
            let w = weight * loss.weight(weight.sqrt() * r.abs());
            h += w * j.transpose() * j;
            b -= w * j.transpose() * r;
        }
        loop {
            let damped = h + Matrix6::identity() * beta;
            let Some(chol) = damped.cholesky() else {
                beta *= config.beta_up;
                if beta > config.beta_max {
                    round.termination = Termination::Singular;
                    break 'outer;
                }
                continue;
            };
            let step = chol.solve(&b);
            if step.norm() < config.step_tolerance {
                round.termination = Termination::StepConverged;
                break 'outer;
            }
            let trial_pose = apply_twist(&Twist::from_vector(&step), &pose);
            let trial = costs(map, &trial_pose, points, weight, &loss);
            let both = |i: usize| current[i].is_some() && trial[i].is_some();
            let cur_cmp = sum_where(&current, both);
            let trial_cmp = sum_where(&trial, both);
            if trial_cmp < cur_cmp {
                pose = trial_pose;
                current = trial;
                beta = (beta * config.beta_down).max(config.beta_min);
                let energy = sum_where(&current, |_| true);
                round.accepted_energies.push(energy);
                round.final_energy = energy;
                if (cur_cmp - trial_cmp) / cur_cmp.max(f64::MIN_POSITIVE) < config.energy_tolerance {
                    round.termination = Termination::EnergyConverged;
                    break 'outer;
                }
                if current.iter().filter(|c| c.is_some()).count() < MIN_FACTORS {
                    return Err(SolverError::DegenerateProblem(
                        "pose moved out of the observed map".into(),
                    ));
                }
                continue 'outer;
            }
            beta *= config.beta_up;
            if beta > config.beta_max {
                round.termination = Termination::DampingExhausted;
                break 'outer;
            }
        }
    }
    pose = pose.renormalized();
    round.final_energy = sum_where(&current, |_| true);
    let report = SolveReport {
        iterations: round.iterations,
        initial_energy,
        final_energy: round.final_energy,
        breakdown: EnergyBreakdown {
            repro: 0.0,
            sdf: round.final_energy,
            lambda: 1.0,
        },
        outliers_removed: Vec::new(),
        sdf_deactivated: Vec::new(),
        migrated: Vec::new(),
        skipped: Vec::new(),
        termination: round.termination,
        rounds: vec![round],
    };
    Ok((pose, report))
}
