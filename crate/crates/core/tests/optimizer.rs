mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sdfloc::factors::LandmarkId;
use sdfloc::geometry::project;
use sdfloc::optimizer::*;
use sdfloc::scene::Primitive;
use sdfloc::sdf_map::{Aabb, MapParams};
use sdfloc::trajectory::look_at;
use sdfloc::{Pixel, Pose, SdfMap, SolverError};

use common::{arc_problem, camera, orbit_arc, perturb, pose_error, room_map};

const VOXEL: f64 = 0.125;

/// Floor `z = 0` and walls `x = -1.5`, `y = -1.5` on a dyadic grid, so the
/// field is linear (and interpolation exact) wherever one plane is nearest.
fn corner_map() -> Arc<SdfMap> {
    let planes = [
        Primitive::plane(Vector3::z(), 0.0),
        Primitive::plane(Vector3::x(), 1.5),
        Primitive::plane(Vector3::y(), 1.5),
    ];
    let bounds = Aabb::new(Vector3::new(-2.0, -2.0, -0.5), Vector3::new(2.0, 2.0, 2.5));
    Arc::new(SdfMap::build_from_analytic(&planes, MapParams::new(VOXEL), bounds).unwrap())
}

fn floor_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.5), rng.random_range(-1.0..1.5), 0.0))
        .collect()
}

/// Points on all three planes, kept at least 0.5 m from the other two.
fn corner_points(per_plane: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = floor_points(per_plane, &mut rng);
    for _ in 0..per_plane {
        points.push(Vector3::new(-1.5, rng.random_range(-1.0..1.5), rng.random_range(0.5..2.0)));
        points.push(Vector3::new(rng.random_range(-1.0..1.5), -1.5, rng.random_range(0.5..2.0)));
    }
    points
}

/// Camera-to-world poses looking into the corner.
fn corner_cameras() -> Vec<Pose> {
    [(1.4, 0.9, 1.6), (1.1, 1.2, 1.4), (0.8, 1.5, 1.7), (1.5, 0.5, 1.2)]
        .iter()
        .map(|&(x, y, z)| look_at(&Vector3::new(x, y, z), &Vector3::new(-0.6, -0.6, 0.6)))
        .collect()
}

fn observe(pose_wc: &Pose, p: &Vector3<f64>, noise: (f64, f64)) -> Option<Pixel> {
    let px = project(&camera(), &pose_wc.inverse().transform_point(p)).ok()?;
    let cam = camera();
    let inside = px.u >= 0.0 && px.v >= 0.0 && px.u < f64::from(cam.width) && px.v < f64::from(cam.height);
    inside.then(|| Pixel::new(px.u + noise.0, px.v + noise.1))
}

/// Joint problem over the corner scene with landmarks seen at least twice.
fn corner_problem(
    lambda: f64,
    sigma_px: f64,
    seed: u64,
    pose_of: impl Fn(usize, &Pose) -> Pose,
    point_of: impl Fn(&Vector3<f64>) -> Vector3<f64>,
) -> (Problem, Vec<Vector3<f64>>) {
    let cameras = corner_cameras();
    let points = corner_points(20, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let noise = Normal::new(0.0, sigma_px.max(f64::MIN_POSITIVE)).unwrap();
    let mut sample = || if sigma_px > 0.0 { noise.sample(&mut rng) } else { 0.0 };
    let mut problem = Problem::new(corner_map(), camera(), lambda);
    for (k, c) in cameras.iter().enumerate() {
        problem.add_keyframe(k, pose_of(k, c).inverse(), false).unwrap();
    }
    let mut kept = Vec::new();
    for p in &points {
        let views: Vec<_> = cameras
            .iter()
            .enumerate()
            .filter_map(|(k, c)| observe(c, p, (sample(), sample())).map(|px| (k, px)))
            .collect();
        if views.len() < 2 {
            continue;
        }
        let id = kept.len();
        problem.add_landmark(id, point_of(p), Membership::MapConstrained).unwrap();
        for (k, px) in views {
            problem.add_observation(id, k, px).unwrap();
        }
        kept.push(*p);
    }
    (problem, kept)
}

fn rotation(axis: Vector3<f64>, deg: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), deg.to_radians())
}

fn tight() -> SolverConfig {
    SolverConfig {
        max_iterations: 100,
        energy_tolerance: 1e-15,
        step_tolerance: 1e-14,
        ..SolverConfig::default()
    }
}

#[test]
fn refine_pose_keeps_the_true_pose() {
    let map = corner_map();
    let truth = corner_cameras()[0];
    let local: Vec<_> = corner_points(30, 1).iter().map(|p| truth.inverse().transform_point(p)).collect();
    let (pose, report) = refine_pose(&map, &truth, &local, &SolverConfig::default()).unwrap();
    let (t, r) = pose_error(&pose, &truth);
    assert!(t <= 1e-9 && r <= 1e-7, "{t} m {r} deg");
    assert!(report.final_energy <= 1e-12, "{}", report.final_energy);
    assert!(report.converged());
}

#[test]
fn refine_pose_on_a_plane_fixes_only_the_out_of_plane_motion() {
    let map = corner_map();
    let truth = corner_cameras()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let local: Vec<_> = floor_points(60, &mut rng)
        .iter()
        .map(|p| truth.inverse().transform_point(p))
        .collect();
    let tilt = rotation(Vector3::new(1.0, 1.0, 1.0), 2.0).to_rotation_matrix().into_inner();
    let start = Pose::from_parts(tilt * truth.rotation, truth.translation + Vector3::new(0.3, -0.2, 0.05));
    let (pose, _) = refine_pose(&map, &start, &local, &tight()).unwrap();

    // The floor seen from the camera: normal Rᵀn and height n·t.
    let n = Vector3::z();
    assert!((pose.rotation.transpose() * n - truth.rotation.transpose() * n).norm() <= 1e-6);
    assert!((pose.translation.z - truth.translation.z).abs() <= 1e-6);
    let in_plane = (pose.translation - truth.translation).xy().norm();
    assert!(in_plane > 0.1, "in-plane offset {in_plane} should not be observable");
}

#[test]
fn refine_pose_needs_six_points() {
    let truth = corner_cameras()[0];
    let local: Vec<_> = corner_points(30, 3)[..5].iter().map(|p| truth.inverse().transform_point(p)).collect();
    let result = refine_pose(&corner_map(), &truth, &local, &SolverConfig::default());
    assert!(matches!(result, Err(SolverError::DegenerateProblem(_))));
}

/// Landmark on the wall `x = -1.5` seen without noise by the first two cameras.
fn wall_landmark(start: impl Fn(&Vector3<f64>, &Pose) -> Vector3<f64>) -> (Problem, Vector3<f64>) {
    let cameras = corner_cameras();
    let truth = Vector3::new(-1.5, 0.2, 1.0);
    let mut problem = Problem::new(corner_map(), camera(), 1.0);
    for (k, c) in cameras[..2].iter().enumerate() {
        problem.add_keyframe(k, c.inverse(), true).unwrap();
    }
    problem
        .add_landmark(0, start(&truth, &cameras[0]), Membership::MapConstrained)
        .unwrap();
    for (k, c) in cameras[..2].iter().enumerate() {
        problem.add_observation(0, k, observe(c, &truth, (0.0, 0.0)).unwrap()).unwrap();
    }
    (problem, truth)
}

#[test]
fn refine_structure_leaves_an_optimal_landmark() {
    let (mut problem, truth) = wall_landmark(|p, _| *p);
    refine_structure(&mut problem, &SolverConfig::default()).unwrap();
    assert!((problem.landmarks()[&0].position - truth).norm() <= 1e-9);
}

#[test]
fn refine_structure_pulls_a_deep_landmark_onto_the_wall() {
    let (mut problem, _) = wall_landmark(|p, c| c.translation + (p - c.translation) * 1.05);
    let map = corner_map();
    let start = problem.landmarks()[&0].position;
    assert!(map.interpolate(&start).unwrap().distance.abs() > VOXEL);
    refine_structure(&mut problem, &SolverConfig::default()).unwrap();
    let p = problem.landmarks()[&0].position;
    assert!(map.interpolate(&p).unwrap().distance.abs() <= 0.1 * VOXEL);
    let worst = problem.residuals().repro.iter().map(|r| r.2.sqrt()).fold(0.0, f64::max);
    assert!(worst <= 0.5, "{worst} px");
}

#[test]
fn zero_lambda_structure_equals_vision_only() {
    let build = |membership| {
        let (problem, _) = corner_problem(0.0, 0.7, 4, |_, c| *c, |p| p + Vector3::new(0.02, -0.01, 0.015));
        let mut copy = Problem::new(corner_map(), camera(), 0.0);
        for (k, kf) in problem.keyframes() {
            copy.add_keyframe(*k, kf.pose, true).unwrap();
        }
        for (id, lm) in problem.landmarks() {
            copy.add_landmark(*id, lm.position, membership).unwrap();
        }
        for f in problem.repro_factors() {
            copy.add_observation(f.landmark, f.keyframe, f.measurement).unwrap();
        }
        copy
    };
    let mut coupled = build(Membership::MapConstrained);
    let mut vision = build(Membership::VisionOnly);
    refine_structure(&mut coupled, &SolverConfig::default()).unwrap();
    refine_structure(&mut vision, &SolverConfig::default()).unwrap();
    for (id, lm) in coupled.landmarks() {
        assert!((lm.position - vision.landmarks()[id].position).norm() <= 1e-9, "landmark {id}");
    }
}

#[test]
fn joint_optimize_stops_at_a_noise_free_optimum() {
    let (mut problem, _) = corner_problem(1.0, 0.0, 5, |_, c| *c, |p| *p);
    problem.set_keyframe_fixed(0, true);
    let report = joint_optimize(&mut problem, &SolverConfig::default()).unwrap();
    assert!(report.rounds.iter().all(|r| r.iterations <= 2), "{:?}", report.rounds);
    assert!(report.final_energy <= 1e-10, "{}", report.final_energy);
}

#[test]
fn joint_optimize_requires_a_gauge() {
    let (mut vision, _) = corner_problem(0.0, 0.0, 6, |_, c| *c, |p| *p);
    vision.gauge = GaugeMode::SdfAnchored;
    assert!(matches!(
        joint_optimize(&mut vision, &SolverConfig::default()),
        Err(SolverError::GaugeUnfixed)
    ));
    vision.gauge = GaugeMode::FixOldest;
    assert!(joint_optimize(&mut vision, &SolverConfig::default()).is_ok());

    let (mut anchored, _) = corner_problem(1.0, 0.0, 6, |_, c| *c, |p| *p);
    anchored.gauge = GaugeMode::SdfAnchored;
    assert!(joint_optimize(&mut anchored, &SolverConfig::default()).is_ok());
}

#[test]
fn joint_optimize_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let starts: Vec<_> = corner_cameras().iter().map(|c| perturb(c, 0.02, 1.0, &mut rng)).collect();
    let (mut problem, _) = corner_problem(1.0, 0.5, 7, |k, _| starts[k], |p| *p);
    let config = SolverConfig::default();
    let first = joint_optimize(&mut problem, &config).unwrap();
    let second = joint_optimize(&mut problem, &config).unwrap();
    let change = (first.final_energy - second.final_energy).abs();
    assert!(
        change <= config.energy_tolerance * first.final_energy,
        "{} then {}",
        first.final_energy,
        second.final_energy
    );
}

#[test]
fn vision_only_solution_is_congruent_under_a_rigid_shift() {
    let shift = Pose::from_parts(
        rotation(Vector3::new(0.2, -1.0, 0.4), 0.5).to_rotation_matrix().into_inner(),
        Vector3::new(0.01, -0.005, 0.008),
    );
    let run = |moved: bool| {
        let g = if moved { shift } else { Pose::identity() };
        let (mut problem, _) = corner_problem(
            0.0,
            0.5,
            8,
            |k, c| if k == 0 { *c } else { g.compose(c) },
            |p| g.transform_point(p),
        );
        problem.set_keyframe_fixed(0, true);
        joint_optimize(&mut problem, &tight()).unwrap();
        problem
    };
    let (plain, moved) = (run(false), run(true));
    let (a, b) = (plain.residuals(), moved.residuals());
    assert_eq!(a.repro.len(), b.repro.len());
    for (x, y) in a.repro.iter().zip(&b.repro) {
        assert_eq!((x.0, x.1), (y.0, y.1));
        assert!((x.2 - y.2).abs() <= 1e-8, "{} vs {}", x.2, y.2);
    }
}

#[test]
fn sdf_factors_pull_a_shifted_solution_back_to_the_map_frame() {
    let shift = Pose::from_parts(
        rotation(Vector3::new(1.0, 0.3, -0.5), 1.0).to_rotation_matrix().into_inner(),
        Vector3::new(0.03, -0.02, 0.01),
    );
    let run = |g: Pose| {
        let (mut problem, _) = corner_problem(1.0, 0.5, 9, |_, c| g.compose(c), |p| g.transform_point(p));
        problem.gauge = GaugeMode::SdfAnchored;
        joint_optimize(&mut problem, &tight()).unwrap();
        problem
    };
    let (plain, moved) = (run(Pose::identity()), run(shift));
    for (k, kf) in plain.keyframes() {
        let (t, r) = pose_error(&kf.pose.inverse(), &moved.keyframes()[k].pose.inverse());
        assert!(t <= 1e-3 && r <= 1e-2, "keyframe {k}: {t} m {r} deg");
    }
}

/// Mean camera-center error against the arc's ground truth.
fn mean_position_error(problem: &Problem, truth: &[Pose]) -> f64 {
    let errors: Vec<_> = problem
        .keyframes()
        .iter()
        .map(|(k, kf)| pose_error(&kf.pose.inverse(), &truth[*k]).0)
        .collect();
    errors.iter().sum::<f64>() / errors.len() as f64
}

#[test]
fn corrupted_measurements_are_excluded() {
    let map = room_map(0.05);
    let mut excluded = 0;
    let mut corrupted_total = 0;
    for seed in 0..3u64 {
        let clean_arc = orbit_arc(10, 3, 1200, 0.5, seed);
        let mut arc = orbit_arc(10, 3, 1200, 0.5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut corrupted: Vec<(LandmarkId, usize)> = Vec::new();
        for id in 0..arc.scene.anchors().len() {
            for k in arc.tracks.keyframes_observing(id).collect::<Vec<_>>() {
                if rng.random::<f64>() < 0.10 {
                    let px = arc.tracks.get(id, k).unwrap();
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    arc.tracks.set(id, k, Pixel::with_level(px.u + 20.0 * a.cos(), px.v + 20.0 * a.sin(), px.level));
                    corrupted.push((id, k));
                }
            }
        }
        let mut prng = ChaCha8Rng::seed_from_u64(400 + seed);
        let starts: Vec<_> = arc.trajectory.poses().iter().map(|p| perturb(p, 0.01, 0.5, &mut prng)).collect();
        let truth = arc.trajectory.poses().to_vec();

        let mut clean = arc_problem(&clean_arc, map.clone(), 1.0, |k, _| starts[k], |_, x| *x);
        joint_optimize(&mut clean, &SolverConfig::default()).unwrap();
        let mut dirty = arc_problem(&arc, map.clone(), 1.0, |k, _| starts[k], |_, x| *x);
        let in_problem: Vec<_> = corrupted
            .into_iter()
            .filter(|(id, _)| dirty.landmarks().contains_key(id))
            .collect();
        let report = joint_optimize(&mut dirty, &SolverConfig::default()).unwrap();

        let removed: BTreeSet<_> = report.outliers_removed.iter().copied().collect();
        excluded += in_problem.iter().filter(|(id, _)| removed.contains(id)).count();
        corrupted_total += in_problem.len();
        let (e_clean, e_dirty) = (mean_position_error(&clean, &truth), mean_position_error(&dirty, &truth));
        assert!(e_dirty <= 2.0 * e_clean, "seed {seed}: {e_dirty} vs clean {e_clean}");
    }
    assert!(excluded as f64 >= 0.9 * corrupted_total as f64, "{excluded}/{corrupted_total}");
}

/// Independent energy of one landmark with every pose fixed.
fn landmark_energy(problem: &Problem, id: LandmarkId, p: &Vector3<f64>) -> f64 {
    let huber = |n: f64, d: f64| if n <= d { n * n } else { 2.0 * d * n - d * d };
    let delta = SolverConfig::default().huber_delta;
    let map = problem.map();
    let mut e = 0.0;
    for f in problem.repro_factors().iter().filter(|f| f.landmark == id) {
        let cam = problem.keyframes()[&f.keyframe].pose.transform_point(p);
        let px = project(problem.camera(), &cam).unwrap();
        let sigma = f64::from(1u32 << f.measurement.level);
        let n = ((f.measurement.u - px.u).powi(2) + (f.measurement.v - px.v).powi(2)).sqrt() / sigma;
        e += huber(n, delta);
    }
    if problem.sdf_factors().get(&id).is_some_and(|f| f.active) {
        e += problem.lambda * huber(map.interpolate(p).unwrap().distance.abs() / map.sigma_sdf(), delta);
    }
    e
}

/// Exhaustive search on a 21³ grid, recentred and halved until the spacing
/// falls below 1e-8 m.
fn grid_minimum(f: impl Fn(&Vector3<f64>) -> f64, center: Vector3<f64>, half_width: f64) -> f64 {
    let (mut c, mut h) = (center, half_width);
    let mut best = f(&c);
    while h / 10.0 > 1e-8 {
        let step = h / 10.0;
        let mut next = c;
        for i in -10..=10 {
            for j in -10..=10 {
                for l in -10..=10 {
                    let p = c + Vector3::new(f64::from(i), f64::from(j), f64::from(l)) * step;
                    let e = f(&p);
                    if e < best {
                        best = e;
                        next = p;
                    }
                }
            }
        }
        c = next;
        h /= 2.0;
    }
    best
}

#[test]
fn small_problem_matches_brute_force_grid() {
    let cameras = corner_cameras();
    let points = corner_points(20, 11);
    let on_plane = |p: &Vector3<f64>, plane: usize| [p.z == 0.0, p.x == -1.5, p.y == -1.5][plane];
    let truths: Vec<_> = (0..3)
        .map(|plane| {
            *points
                .iter()
                .find(|p| on_plane(p, plane) && cameras[..2].iter().all(|c| observe(c, p, (0.0, 0.0)).is_some()))
                .unwrap()
        })
        .collect();
    let noise = [(0.4, -0.3), (-0.2, 0.5), (0.3, 0.1), (-0.4, -0.2), (0.1, 0.3), (0.5, -0.4)];
    let mut problem = Problem::new(corner_map(), camera(), 1.0);
    for (k, cam) in cameras[..2].iter().enumerate() {
        problem.add_keyframe(k, cam.inverse(), true).unwrap();
    }
    for (id, p) in truths.iter().enumerate() {
        problem
            .add_landmark(id, p + Vector3::new(0.01, 0.02, -0.01), Membership::MapConstrained)
            .unwrap();
        for k in 0..2 {
            let px = observe(&cameras[k], p, noise[2 * id + k]).unwrap();
            problem.add_observation(id, k, px).unwrap();
        }
    }
    let report = joint_optimize(&mut problem, &tight()).unwrap();
    assert!(report.outliers_removed.is_empty() && report.sdf_deactivated.is_empty());
    let oracle: f64 = truths
        .iter()
        .enumerate()
        .map(|(id, p)| grid_minimum(|q| landmark_energy(&problem, id, q), *p, 0.05))
        .sum();
    let solved = problem.energy().total();
    let recomputed: f64 = (0..3).map(|id| landmark_energy(&problem, id, &problem.landmarks()[&id].position)).sum();
    assert!((solved - recomputed).abs() <= 1e-12 * solved.max(1.0), "{solved} vs {recomputed}");
    assert!((solved - oracle).abs() <= 1e-6, "solver {solved} vs grid {oracle}");
}
