#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use sdfloc::optimizer::{GaugeMode, Membership, Problem};
use sdfloc::scene::{standard_room, Primitive};
use sdfloc::sdf_map::{Aabb, MapParams};
use sdfloc::sim::{generate_tracks, SyntheticScene, TrackTable};
use sdfloc::trajectory::Trajectory;
use sdfloc::{CameraIntrinsics, Pose, SdfMap};

pub fn room_bounds() -> Aabb {
    Aabb::new(Vector3::new(-2.6, -2.6, -0.2), Vector3::new(2.6, 2.6, 2.2))
}

pub fn room_map(voxel_size: f64) -> Arc<SdfMap> {
    let params = MapParams::new(voxel_size).with_truncation(1.0);
    Arc::new(SdfMap::build_from_analytic(&standard_room(), params, room_bounds()).unwrap())
}

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap()
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from(UnitSphere.sample(rng))
}

/// `pose` moved by exactly `translation` meters and rotated by exactly
/// `rotation_deg` about its own center, both in random directions.
pub fn perturb(pose: &Pose, translation: f64, rotation_deg: f64, rng: &mut ChaCha8Rng) -> Pose {
    let axis = Unit::new_normalize(random_unit(rng));
    let r = UnitQuaternion::from_axis_angle(&axis, rotation_deg.to_radians());
    let rotation = r.to_rotation_matrix().into_inner() * pose.rotation;
    Pose::from_parts(rotation, pose.translation + random_unit(rng) * translation)
}

/// Translation (m) and rotation (deg) separating two poses.
pub fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    let d = a.inverse().compose(b);
    ((a.translation - b.translation).norm(), d.rotation_angle().to_degrees())
}

/// A short arc of the standard orbit with tracks of room anchors.
pub struct ArcSequence {
    pub scene: SyntheticScene,
    pub trajectory: Trajectory,
    pub tracks: TrackTable,
}

pub fn orbit_arc(keyframes: usize, stride: usize, anchors: usize, sigma_px: f64, seed: u64) -> ArcSequence {
    let full = Trajectory::orbit(200, 1.5, 1.3, Vector3::new(0.0, 0.0, 0.3), 1.0, 0.1);
    let n = keyframes * stride;
    let timestamps = full.timestamps()[..n].iter().step_by(stride).copied().collect();
    let poses = full.poses()[..n].iter().step_by(stride).copied().collect();
    let trajectory = Trajectory::new(timestamps, poses).unwrap();
    let scene = SyntheticScene::sample(standard_room(), &room_bounds(), anchors, seed).unwrap();
    let tracks = generate_tracks(&scene, &trajectory, &camera(), sigma_px, seed + 1).unwrap();
    ArcSequence {
        scene,
        trajectory,
        tracks,
    }
}

/// Joint problem over every keyframe of `arc`, with landmarks observed at
/// least twice. Poses and points come from the callbacks.
pub fn arc_problem(
    arc: &ArcSequence,
    map: Arc<SdfMap>,
    lambda: f64,
    pose_of: impl Fn(usize, &Pose) -> Pose,
    point_of: impl Fn(usize, &Vector3<f64>) -> Vector3<f64>,
) -> Problem {
    let mut problem = Problem::new(map, camera(), lambda);
    problem.gauge = GaugeMode::SdfAnchored;
    for (k, p) in arc.trajectory.poses().iter().enumerate() {
        problem.add_keyframe(k, pose_of(k, p).inverse(), false).unwrap();
    }
    for (id, anchor) in arc.scene.anchors().iter().enumerate() {
        let views: Vec<_> = arc.tracks.keyframes_observing(id).collect();
        if views.len() < 2 {
            continue;
        }
        problem.add_landmark(id, point_of(id, anchor), Membership::MapConstrained).unwrap();
        for k in views {
            problem.add_observation(id, k, arc.tracks.get(id, k).unwrap()).unwrap();
        }
    }
    problem
}

/// Surface samples of the standard room.
pub fn room_points(count: usize, seed: u64) -> Vec<Vector3<f64>> {
    SyntheticScene::sample(standard_room(), &room_bounds(), count, seed)
        .unwrap()
        .anchors()
        .to_vec()
}

pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

pub fn sphere(radius: f64) -> Vec<Primitive> {
    vec![Primitive::sphere(Vector3::zeros(), radius)]
}
