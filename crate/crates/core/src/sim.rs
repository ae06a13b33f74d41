//! Deterministic stand-in for a feature-tracking front-end: surface anchors,
//! noisy pixel tracks with analytic visibility, odometry corruption, and
//! landmark generation (ray casting into the map first, multi-view mid-point
//! triangulation as the fallback).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::factors::{KeyframeId, LandmarkId};
use crate::geometry::{apply_twist, project, CameraIntrinsics, Pixel, Pose, Twist};
use crate::optimizer::Membership;
use crate::scene::{first_entry, union_distance, Primitive};
use crate::sdf_map::{Aabb, SdfMap};
use crate::trajectory::Trajectory;

/// Anchors further than this from the analytic surface are rejected.
pub const ANCHOR_TOLERANCE: f64 = 1e-9;
/// A keyframe seeing fewer anchors than this is a scene/trajectory mismatch.
pub const MIN_VISIBLE: usize = 8;
/// Minimum angle between two viewing rays for mid-point triangulation.
pub const MIN_PARALLAX_DEG: f64 = 1.0;
/// Fraction of observations detected at pyramid levels 0, 1 and 2.
const LEVEL_SPLIT: [f64; 2] = [0.7, 0.9];
const OCCLUSION_EPS: f64 = 1e-6;
/// Surfaces seen at a steeper angle than this from their normal are not tracked.
pub const MAX_INCIDENCE_DEG: f64 = 80.0;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    anchors: Vec<Vector3<f64>>,
    pub seed: u64,
}

impl SyntheticScene {
    /// Checks that every anchor lies on the surface of the union.
    pub fn new(primitives: Vec<Primitive>, anchors: Vec<Vector3<f64>>, seed: u64) -> Result<Self, SimError> {
        if primitives.is_empty() {
            return Err(SimError::Map(crate::error::MapError::EmptyScene));
        }
        for (i, a) in anchors.iter().enumerate() {
            let d = union_distance(&primitives, a);
            if d.abs() > ANCHOR_TOLERANCE {
                return Err(SimError::InvalidTrajectory(format!("anchor {i} is {d:e} m off the surface")));
            }
        }
        Ok(Self {
            primitives,
            anchors,
            seed,
        })
    }

    /// Samples `count` anchors uniformly over primitives, keeping only
    /// points inside `bounds` that lie on the outer surface of the union.
    pub fn sample(primitives: Vec<Primitive>, bounds: &Aabb, count: usize, seed: u64) -> Result<Self, SimError> {
        if primitives.is_empty() {
            return Err(SimError::Map(crate::error::MapError::EmptyScene));
        }
        let mut rng = rng(seed);
        let mut anchors = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while anchors.len() < count {
            attempts += 1;
            if attempts > count * 1000 {
                return Err(SimError::InvalidTrajectory(format!(
                    "could only place {} of {count} anchors inside the bounds",
                    anchors.len()
                )));
            }
            let prim = &primitives[rng.random_range(0..primitives.len())];
            let p = sample_surface(prim, bounds, &mut rng);
            if bounds.contains(&p) && union_distance(&primitives, &p).abs() <= ANCHOR_TOLERANCE {
                anchors.push(p);
            }
        }
        Ok(Self {
            primitives,
            anchors,
            seed,
        })
    }

    pub fn anchors(&self) -> &[Vector3<f64>] {
        &self.anchors
    }
}

fn sample_surface(prim: &Primitive, bounds: &Aabb, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let uniform_in = |rng: &mut ChaCha8Rng| {
        Vector3::from_fn(|i, _| rng.random_range(bounds.min[i]..=bounds.max[i]))
    };
    match *prim {
        Primitive::Sphere { center, radius } => {
            let d: [f64; 3] = UnitSphere.sample(rng);
            center + Vector3::from(d) * radius
        }
        Primitive::Box { center, size } => {
            let half = size * 0.5;
            let axis = rng.random_range(0..3);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut local = Vector3::from_fn(|i, _| rng.random_range(-half[i]..=half[i]));
            local[axis] = sign * half[axis];
            center + local
        }
        Primitive::Plane { normal, offset } => {
            let p = uniform_in(rng);
            p - normal * (normal.dot(&p) + offset)
        }
    }
}

/// One pixel measurement of an anchor in a keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub landmark: LandmarkId,
    pub keyframe: KeyframeId,
    pub pixel: Pixel,
}

/// Immutable table of observations, indexed by keyframe and by anchor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackTable {
    observations: BTreeMap<(KeyframeId, LandmarkId), Pixel>,
    by_landmark: BTreeMap<LandmarkId, BTreeSet<KeyframeId>>,
}

impl TrackTable {
    pub fn from_observations(obs: impl IntoIterator<Item = Observation>) -> Self {
        let mut t = Self::default();
        for o in obs {
            t.observations.insert((o.keyframe, o.landmark), o.pixel);
            t.by_landmark.entry(o.landmark).or_default().insert(o.keyframe);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn get(&self, landmark: LandmarkId, keyframe: KeyframeId) -> Option<Pixel> {
        self.observations.get(&(keyframe, landmark)).copied()
    }

    /// Observations ordered by keyframe, then landmark.
    pub fn iter(&self) -> impl Iterator<Item = Observation> + '_ {
        self.observations.iter().map(|(&(keyframe, landmark), &pixel)| Observation {
            landmark,
            keyframe,
            pixel,
        })
    }

    pub fn in_keyframe(&self, keyframe: KeyframeId) -> impl Iterator<Item = (LandmarkId, Pixel)> + '_ {
        self.observations
            .range((keyframe, 0)..=(keyframe, LandmarkId::MAX))
            .map(|(&(_, l), &px)| (l, px))
    }

    pub fn keyframes_observing(&self, landmark: LandmarkId) -> impl Iterator<Item = KeyframeId> + '_ {
        self.by_landmark.get(&landmark).into_iter().flatten().copied()
    }

    /// Replaces one measurement, e.g. to plant an outlier.
    pub fn set(&mut self, landmark: LandmarkId, keyframe: KeyframeId, pixel: Pixel) {
        self.observations.insert((keyframe, landmark), pixel);
        self.by_landmark.entry(landmark).or_default().insert(keyframe);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("landmark_id,keyframe_id,u,v,level\n");
        for o in self.iter() {
            writeln!(s, "{},{},{:.17e},{:.17e},{}", o.landmark, o.keyframe, o.pixel.u, o.pixel.v, o.pixel.level)
                .expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Projects every visible anchor into every keyframe and adds Gaussian pixel
/// noise with standard deviation `σ_px · 2^level`, truncated at 6σ.
///
/// Visibility requires positive depth, a pixel inside the image, and an
/// unobstructed analytic ray from the camera center to the anchor.
pub fn generate_tracks(
    scene: &SyntheticScene,
    trajectory: &Trajectory,
    k: &CameraIntrinsics,
    sigma_px: f64,
    seed: u64,
) -> Result<TrackTable, SimError> {
    if !(sigma_px >= 0.0) {
        return Err(SimError::InvalidTrajectory("sigma_px must be non-negative".into()));
    }
    let mut rng = rng(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |rng: &mut ChaCha8Rng| loop {
        let x: f64 = unit.sample(rng);
        if x.abs() <= 6.0 {
            break x;
        }
    };
    let mut table = TrackTable::default();
    for (kf, t_wc) in trajectory.poses().iter().enumerate() {
        let t_cw = t_wc.inverse();
        let center = t_wc.translation;
        let mut visible = 0;
        for (id, anchor) in scene.anchors().iter().enumerate() {
            let Ok(px) = project(k, &t_cw.transform_point(anchor)) else {
                continue;
            };
            if !k.contains(&px) || occluded(&scene.primitives, &center, anchor) || grazing(&scene.primitives, &center, anchor) {
                continue;
            }
            let r: f64 = rng.random();
            let level = if r < LEVEL_SPLIT[0] {
                0u8
            } else if r < LEVEL_SPLIT[1] {
                1
            } else {
                2
            };
            let sigma = sigma_px * f64::from(1u32 << level);
            let (du, dv) = (draw(&mut rng), draw(&mut rng));
            table.set(id, kf, Pixel::with_level(px.u + sigma * du, px.v + sigma * dv, level));
            visible += 1;
        }
        if visible < MIN_VISIBLE {
            return Err(SimError::NoVisibleFeatures { keyframe: kf, visible });
        }
    }
    Ok(table)
}

/// True when the segment from `eye` to `target` enters a solid before
/// reaching `target`.
pub fn occluded(primitives: &[Primitive], eye: &Vector3<f64>, target: &Vector3<f64>) -> bool {
    let d = target - eye;
    let dist = d.norm();
    match first_entry(primitives, eye, &(d / dist)) {
        Some(t) => t < dist - OCCLUSION_EPS,
        None => false,
    }
}

/// True when the line of sight meets the surface at `target` beyond
/// [`MAX_INCIDENCE_DEG`] from its normal.
pub fn grazing(primitives: &[Primitive], eye: &Vector3<f64>, target: &Vector3<f64>) -> bool {
    let h = 1e-6;
    let normal = Vector3::from_fn(|i, _| {
        let e = Vector3::ith(i, h);
        union_distance(primitives, &(target + e)) - union_distance(primitives, &(target - e))
    });
    let Some(normal) = normal.try_normalize(1e-12) else {
        return false;
    };
    let view = (eye - target).normalize();
    normal.dot(&view) < MAX_INCIDENCE_DEG.to_radians().cos()
}

/// Per-frame odometry corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryNoiseModel {
    /// Translation drift per frame and axis (m).
    pub sigma_t: f64,
    /// Rotation drift per frame and axis (rad).
    pub sigma_r: f64,
    /// Global scale applied to every inter-frame translation.
    pub scale: f64,
}

impl Default for OdometryNoiseModel {
    fn default() -> Self {
        Self {
            sigma_t: 0.0,
            sigma_r: 0.0,
            scale: 1.0,
        }
    }
}

impl OdometryNoiseModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.scale > 0.0) || !(self.sigma_t >= 0.0) || !(self.sigma_r >= 0.0) {
            return Err(SimError::InvalidTrajectory(
                "odometry noise needs scale > 0 and non-negative sigmas".into(),
            ));
        }
        Ok(())
    }
}

/// Re-integrates the trajectory from its first pose using inter-frame
/// motions whose translations are scaled by `s` and perturbed on the right
/// by a Gaussian twist. The first pose is kept exactly.
pub fn corrupt_odometry(trajectory: &Trajectory, noise: &OdometryNoiseModel, seed: u64) -> Result<Trajectory, SimError> {
    noise.validate()?;
    if trajectory.is_empty() {
        return Ok(trajectory.clone());
    }
    let mut rng = rng(seed);
    let nt = Normal::new(0.0, noise.sigma_t).expect("finite sigma");
    let nr = Normal::new(0.0, noise.sigma_r).expect("finite sigma");
    let mut poses = Vec::with_capacity(trajectory.len());
    poses.push(*trajectory.pose(0));
    for i in 1..trajectory.len() {
        let mut delta = trajectory.relative(i);
        delta.translation *= noise.scale;
        if noise.sigma_t > 0.0 || noise.sigma_r > 0.0 {
            let rho = Vector3::from_fn(|_, _| nt.sample(&mut rng));
            let phi = Vector3::from_fn(|_, _| nr.sample(&mut rng));
            let n = apply_twist(&Twist::new(rho, phi), &Pose::identity());
            delta = delta.compose(&n);
        }
        let mut next = poses[i - 1].compose(&delta);
        if i % crate::geometry::RENORMALIZE_EVERY == 0 {
            next = next.renormalized();
        }
        poses.push(next);
    }
    trajectory.with_poses(poses)
}

/// How a landmark was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LandmarkSource {
    /// Zero crossing along the optical ray. `depth_sigma` is one pixel of
    /// disparity converted to depth over the widest available baseline.
    RayCast { depth: f64, depth_sigma: Option<f64> },
    Triangulated { views: usize, parallax_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratedLandmark {
    pub position: Vector3<f64>,
    pub membership: Membership,
    pub source: LandmarkSource,
}

/// Initializes the landmark seen at `pixel` in keyframe `keyframe`.
///
/// `poses` maps keyframes to camera-to-map transforms; only keyframes listed
/// there take part. The ray through `pixel` is cast into the map first; on a
/// miss, the track table supplies correspondences in the other keyframes for
/// mid-point triangulation.
#[allow(clippy::too_many_arguments)]
pub fn generate_landmark(
    map: &SdfMap,
    k: &CameraIntrinsics,
    keyframe: KeyframeId,
    pixel: &Pixel,
    landmark: LandmarkId,
    tracks: &TrackTable,
    poses: &BTreeMap<KeyframeId, Pose>,
    max_range: f64,
) -> Result<GeneratedLandmark, SimError> {
    let t_wc = poses
        .get(&keyframe)
        .ok_or_else(|| SimError::InvalidTrajectory(format!("keyframe {keyframe} has no pose")))?;
    let origin = t_wc.translation;
    let dir = (t_wc.rotation * k.back_project(pixel)).normalize();
    if let Some(hit) = map.raycast_zero_crossing(&origin, &dir, max_range) {
        let baseline = tracks
            .keyframes_observing(landmark)
            .filter(|j| *j != keyframe)
            .filter_map(|j| poses.get(&j))
            .map(|p| (p.translation - origin).norm())
            .fold(0.0, f64::max);
        let depth_sigma = (baseline > 0.0).then(|| hit.depth * hit.depth / (k.fx * baseline));
        return Ok(GeneratedLandmark {
            position: hit.point,
            membership: Membership::MapConstrained,
            source: LandmarkSource::RayCast {
                depth: hit.depth,
                depth_sigma,
            },
        });
    }
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = tracks
        .keyframes_observing(landmark)
        .filter_map(|j| {
            let pose = poses.get(&j)?;
            let px = if j == keyframe { *pixel } else { tracks.get(landmark, j)? };
            Some((pose.translation, (pose.rotation * k.back_project(&px)).normalize()))
        })
        .collect();
    let (position, parallax_deg) = triangulate_midpoint(&rays)?;
    let membership = if map.interpolate(&position).is_ok() {
        Membership::MapConstrained
    } else {
        Membership::VisionOnly
    };
    Ok(GeneratedLandmark {
        position,
        membership,
        source: LandmarkSource::Triangulated {
            views: rays.len(),
            parallax_deg,
        },
    })
}

/// Point minimizing the summed squared distance to the rays `(origin, unit
/// direction)`. Returns the point and the widest pairwise ray angle in
/// degrees; fails below [`MIN_PARALLAX_DEG`] or if the point lies behind a ray.
pub fn triangulate_midpoint(rays: &[(Vector3<f64>, Vector3<f64>)]) -> Result<(Vector3<f64>, f64), SimError> {
    if rays.len() < 2 {
        return Err(SimError::TriangulationDegenerate(format!("{} view(s)", rays.len())));
    }
    let mut max_cos = -1.0f64;
    let mut parallax = 0.0f64;
    for (i, a) in rays.iter().enumerate() {
        for b in &rays[i + 1..] {
            let angle = a.1.dot(&b.1).clamp(-1.0, 1.0).acos();
            parallax = parallax.max(angle);
            max_cos = max_cos.max(a.1.dot(&b.1));
        }
    }
    let parallax_deg = parallax.to_degrees();
    if parallax_deg < MIN_PARALLAX_DEG {
        return Err(SimError::TriangulationDegenerate(format!("parallax {parallax_deg:.3} deg")));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (c, d) in rays {
        let m = Matrix3::identity() - d * d.transpose();
        a += m;
        b += m * c;
    }
    let p = a
        .cholesky()
        .ok_or_else(|| SimError::TriangulationDegenerate("parallel rays".into()))?
        .solve(&b);
    if rays.iter().any(|(c, d)| (p - c).dot(d) <= 0.0) {
        return Err(SimError::TriangulationDegenerate("point behind a camera".into()));
    }
    Ok((p, parallax_deg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::standard_room;
    use crate::sdf_map::MapParams;
    use approx::assert_relative_eq;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap()
    }

    fn room_bounds() -> Aabb {
        Aabb::new(Vector3::new(-2.6, -2.6, -0.2), Vector3::new(2.6, 2.6, 2.0))
    }

    fn room_scene(count: usize) -> SyntheticScene {
        SyntheticScene::sample(standard_room(), &room_bounds(), count, 3).unwrap()
    }

    #[test]
    fn anchors_lie_on_the_surface() {
        let scene = room_scene(500);
        for a in scene.anchors() {
            assert!(union_distance(&scene.primitives, a).abs() <= ANCHOR_TOLERANCE);
        }
        assert!(SyntheticScene::new(standard_room(), vec![Vector3::new(0.0, 0.0, 0.5)], 0).is_err());
    }

    #[test]
    fn noiseless_tracks_reproject_exactly() {
        let scene = room_scene(400);
        let traj = Trajectory::orbit(10, 1.5, 1.3, Vector3::new(0.0, 0.0, 0.3), 0.2, 0.1);
        let k = camera();
        let tracks = generate_tracks(&scene, &traj, &k, 0.0, 1).unwrap();
        assert!(!tracks.is_empty());
        for o in tracks.iter() {
            let t_cw = traj.pose(o.keyframe).inverse();
            let px = project(&k, &t_cw.transform_point(&scene.anchors()[o.landmark])).unwrap();
            assert!((px.u - o.pixel.u).abs() <= 1e-9 && (px.v - o.pixel.v).abs() <= 1e-9);
        }
    }

    #[test]
    fn tracks_are_deterministic_and_bounded() {
        let scene = room_scene(300);
        let traj = Trajectory::orbit(5, 1.5, 1.3, Vector3::new(0.0, 0.0, 0.3), 0.1, 0.1);
        let k = camera();
        let a = generate_tracks(&scene, &traj, &k, 1.0, 9).unwrap();
        let b = generate_tracks(&scene, &traj, &k, 1.0, 9).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        for o in a.iter() {
            let t_cw = traj.pose(o.keyframe).inverse();
            let px = project(&k, &t_cw.transform_point(&scene.anchors()[o.landmark])).unwrap();
            let bound = 6.0 * f64::from(1u32 << o.pixel.level);
            assert!((px.u - o.pixel.u).abs() <= bound && (px.v - o.pixel.v).abs() <= bound);
        }
    }

    #[test]
    fn occluded_anchor_has_no_observation() {
        // Anchor on the far face of a box, camera looking through the box.
        let prims = vec![Primitive::cuboid(Vector3::zeros(), Vector3::repeat(1.0))];
        let far = Vector3::new(0.0, 0.0, -0.5);
        let near = Vector3::new(0.0, 0.0, 0.5);
        let side: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(-0.45 + 0.1 * i as f64, 0.2, 0.5)).collect();
        let mut anchors = vec![far, near];
        anchors.extend(side);
        let scene = SyntheticScene::new(prims.clone(), anchors, 0).unwrap();
        let eye = Vector3::new(0.0, 0.01, 3.0);
        let pose = crate::trajectory::look_at(&eye, &Vector3::zeros());
        let traj = Trajectory::new(vec![0.0], vec![pose]).unwrap();
        let tracks = generate_tracks(&scene, &traj, &camera(), 0.0, 0).unwrap();
        assert!(occluded(&prims, &eye, &far));
        assert!(!occluded(&prims, &eye, &near));
        assert!(tracks.get(0, 0).is_none());
        assert!(tracks.get(1, 0).is_some());
    }

    #[test]
    fn too_few_visible_anchors_is_an_error() {
        let scene = room_scene(5);
        let traj = Trajectory::orbit(2, 1.5, 1.3, Vector3::new(0.0, 0.0, 0.3), 0.1, 0.1);
        assert!(matches!(
            generate_tracks(&scene, &traj, &camera(), 0.0, 0),
            Err(SimError::NoVisibleFeatures { keyframe: 0, .. })
        ));
    }

    #[test]
    fn zero_noise_odometry_is_identity_and_scale_is_exact() {
        let traj = Trajectory::orbit(30, 1.5, 1.3, Vector3::zeros(), 0.3, 0.1);
        let same = corrupt_odometry(&traj, &OdometryNoiseModel::default(), 4).unwrap();
        for (a, b) in traj.poses().iter().zip(same.poses()) {
            assert!((a.to_homogeneous() - b.to_homogeneous()).abs().max() < 1e-12);
        }
        let scaled = corrupt_odometry(
            &traj,
            &OdometryNoiseModel {
                scale: 0.8,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        for i in 1..traj.len() {
            let ratio = scaled.relative(i).translation.norm() / traj.relative(i).translation.norm();
            assert_relative_eq!(ratio, 0.8, epsilon = 1e-12);
        }
    }

    #[test]
    fn translation_drift_matches_random_walk() {
        let n = 100;
        let traj = Trajectory::new((0..n).map(|i| i as f64).collect(), vec![Pose::identity(); n]).unwrap();
        let noise = OdometryNoiseModel {
            sigma_t: 0.01,
            ..Default::default()
        };
        let seeds = 200;
        let mut sq = 0.0;
        for seed in 0..seeds {
            let c = corrupt_odometry(&traj, &noise, seed).unwrap();
            sq += c.poses().last().unwrap().translation.norm_squared();
        }
        // Per-axis std of the final position: σ_t·√(N − 1).
        let measured = (sq / (3.0 * seeds as f64)).sqrt();
        let oracle = 0.01 * ((n - 1) as f64).sqrt();
        assert!((measured / oracle - 1.0).abs() < 0.2, "{measured} vs {oracle}");
    }

    #[test]
    fn triangulation_recovers_point_and_rejects_low_parallax() {
        let p = Vector3::new(0.3, -0.2, 2.0);
        let centers = [Vector3::zeros(), Vector3::new(0.2, 0.0, 0.0), Vector3::new(0.0, 0.15, 0.05)];
        let rays: Vec<_> = centers.iter().map(|c| (*c, (p - c).normalize())).collect();
        let (q, par) = triangulate_midpoint(&rays).unwrap();
        assert!((q - p).norm() < 1e-9);
        assert!(par >= 2.0);
        let close = [(Vector3::zeros(), p.normalize()), (Vector3::new(0.01, 0.0, 0.0), (p - Vector3::new(0.01, 0.0, 0.0)).normalize())];
        assert!(matches!(triangulate_midpoint(&close), Err(SimError::TriangulationDegenerate(_))));
        assert!(triangulate_midpoint(&rays[..1]).is_err());
    }

    fn wall_map() -> SdfMap {
        // Wall z = 2 facing the origin: free space is z < 2.
        SdfMap::build_from_analytic(
            &[Primitive::plane(Vector3::new(0.0, 0.0, -1.0), 2.0)],
            MapParams::new(0.0625),
            Aabb::new(Vector3::new(-1.0, -1.0, 1.0), Vector3::new(1.0, 1.0, 2.5)),
        )
        .unwrap()
    }

    #[test]
    fn ray_cast_landmark_lands_on_wall() {
        let map = wall_map();
        let k = camera();
        let poses: BTreeMap<_, _> = [(0, Pose::identity())].into();
        let px = Pixel::new(350.0, 200.0);
        let tracks = TrackTable::from_observations([Observation {
            landmark: 0,
            keyframe: 0,
            pixel: px,
        }]);
        let g = generate_landmark(&map, &k, 0, &px, 0, &tracks, &poses, 5.0).unwrap();
        assert_eq!(g.membership, Membership::MapConstrained);
        let dir = k.back_project(&px).normalize();
        let analytic = 2.0 / dir.z;
        let LandmarkSource::RayCast { depth, depth_sigma } = g.source else {
            panic!("expected ray cast")
        };
        assert!((depth - analytic).abs() <= map.voxel_size());
        assert!(depth_sigma.is_none());
        assert!(map.interpolate(&g.position).unwrap().distance.abs() <= 0.1 * map.voxel_size());
    }

    #[test]
    fn ray_miss_falls_back_to_triangulation() {
        let map = wall_map();
        let k = camera();
        // Looking away from the wall: no crossing.
        let flip = Pose::from_parts(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), Vector3::new(0.0, 0.0, 1.5));
        let target = Vector3::new(0.1, 0.0, -2.0);
        let second = Pose::from_parts(flip.rotation, flip.translation + Vector3::new(0.35, 0.0, 0.0));
        let poses: BTreeMap<_, _> = [(0, flip), (1, second)].into();
        let obs: Vec<_> = poses
            .iter()
            .map(|(&kf, p)| Observation {
                landmark: 7,
                keyframe: kf,
                pixel: project(&k, &p.inverse().transform_point(&target)).unwrap(),
            })
            .collect();
        let tracks = TrackTable::from_observations(obs.clone());
        let g = generate_landmark(&map, &k, 0, &obs[0].pixel, 7, &tracks, &poses, 5.0).unwrap();
        assert!((g.position - target).norm() < 1e-6);
        assert_eq!(g.membership, Membership::VisionOnly);
        let LandmarkSource::Triangulated { parallax_deg, .. } = g.source else {
            panic!("expected triangulation")
        };
        assert!(parallax_deg > 5.0);

        let single: BTreeMap<_, _> = [(0, flip)].into();
        assert!(matches!(
            generate_landmark(&map, &k, 0, &obs[0].pixel, 7, &tracks, &single, 5.0),
            Err(SimError::TriangulationDegenerate(_))
        ));
    }
}
