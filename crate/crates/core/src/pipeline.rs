//! Track-then-localize loop over a simulated sequence.
//!
//! For every keyframe the odometry-propagated pose is aligned with the map
//! using structure triangulated from the odometry alone, new landmarks are
//! initialized, and the recent window of keyframes is refined jointly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{PipelineError, SolverError};
use crate::eval::{compute_ate, compute_structure_rmse, rmse, Alignment, AteResult, FrameError, StructureReference};
use crate::factors::{KeyframeId, LandmarkId, RobustLoss};
use crate::geometry::{exp_so3, CameraIntrinsics, Pose};
use crate::optimizer::{joint_optimize, refine_pose, refine_structure, GaugeMode, Membership, Problem, SolverConfig, Termination};
use crate::scene::{load_scene, standard_room, Primitive};
use crate::sdf_map::{Aabb, GradientScheme, MapParams, SdfMap};
use crate::sim::{corrupt_odometry, generate_landmark, generate_tracks, triangulate_midpoint, OdometryNoiseModel, SyntheticScene, TrackTable};
use crate::trajectory::Trajectory;

/// Extra refine_pose passes allowed on the first keyframe, whose initial
/// guess carries the full initialization error.
const FIRST_FRAME_PASSES: usize = 5;
/// Scales tried for the first keyframe's local structure, `2^(i/16)`.
const SCALE_STEPS: std::ops::RangeInclusive<i32> = -8..=8;
/// Landmarks seen fewer times inside the optimization window stay fixed.
const MIN_WINDOW_VIEWS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Scene description; the built-in room when absent.
    pub scene: Option<PathBuf>,
    /// Prebuilt map; built from the scene when absent.
    pub map: Option<PathBuf>,
    /// Ground-truth trajectory; an orbit around the scene when absent.
    pub ground_truth: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub voxel_size: f64,
    pub truncation: f64,
    pub map_bounds: Aabb,
    pub frames: usize,
    /// Every `keyframe_every`-th frame becomes a keyframe.
    pub keyframe_every: usize,
    pub anchors: usize,
    pub camera: CameraIntrinsics,
    pub sigma_px: f64,
    pub odometry: OdometryNoiseModel,
    pub seed: u64,
    /// Keyframes used to triangulate the local structure for pose refinement.
    pub structure_window: usize,
    /// Longest ray searched for a zero crossing (m).
    pub max_range: f64,
    /// When false, the odometry is reported unchanged.
    pub localize: bool,
    /// Error added to the first pose: translation (m) and rotation vector (rad).
    pub initial_translation: Vector3<f64>,
    pub initial_rotation: Vector3<f64>,
    /// Gauge of the window problem; `SdfAnchored` lets the map hold every
    /// pose in place.
    pub gauge: GaugeMode,
    pub gradient: GradientScheme,
    /// Alignment applied before the reported ATE.
    pub alignment: Alignment,
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: None,
            map: None,
            ground_truth: None,
            output: None,
            voxel_size: 0.05,
            truncation: 1.0,
            map_bounds: Aabb::new(Vector3::new(-2.6, -2.6, -0.2), Vector3::new(2.6, 2.6, 2.2)),
            frames: 200,
            keyframe_every: 1,
            anchors: 800,
            camera: CameraIntrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).expect("valid intrinsics"),
            sigma_px: 0.5,
            odometry: OdometryNoiseModel {
                sigma_t: 0.005,
                sigma_r: 0.1f64.to_radians(),
                scale: 1.0,
            },
            seed: 0,
            structure_window: 10,
            max_range: 6.0,
            localize: true,
            initial_translation: Vector3::zeros(),
            initial_rotation: Vector3::zeros(),
            gauge: GaugeMode::SdfAnchored,
            gradient: GradientScheme::Blended,
            alignment: Alignment::None,
            solver: SolverConfig {
                window: Some(16),
                ..SolverConfig::default()
            },
        }
    }
}

fn parse_vec3(key: &str, s: &str) -> Result<Vector3<f64>, PipelineError> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| PipelineError::Config(format!("{key}: expected three numbers")))?;
    match v.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(PipelineError::Config(format!("{key}: expected three numbers"))),
    }
}

impl PipelineConfig {
    pub const KEYS: &'static [&'static str] = &[
        "scene",
        "map",
        "ground_truth",
        "output",
        "voxel_size",
        "truncation",
        "map_min",
        "map_max",
        "frames",
        "keyframe_every",
        "anchors",
        "camera",
        "sigma_px",
        "odometry.sigma_t",
        "odometry.sigma_r_deg",
        "odometry.scale",
        "seed",
        "structure_window",
        "max_range",
        "localize",
        "initial.translation",
        "initial.rotation_deg",
        "gauge",
        "gradient",
        "alignment",
    ];

    /// Parses a `key = value` file. Solver keys take a `solver.` prefix;
    /// relative paths resolve against `base`.
    pub fn from_key_values(kv: &KeyValues, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        let mut solver_kv = KeyValues::default();
        for key in kv.keys() {
            if let Some(rest) = key.strip_prefix("solver.") {
                if !SolverConfig::KEYS.contains(&rest) {
                    return Err(PipelineError::Config(format!("unknown key '{key}'")));
                }
                solver_kv.set(rest, kv.get(key).expect("present"));
            } else if !Self::KEYS.contains(&key) {
                return Err(PipelineError::Config(format!("unknown key '{key}'")));
            }
        }
        cfg.solver.apply(&solver_kv)?;

        let err = PipelineError::Config;
        let path = |key: &str| kv.get(key).map(|p| base.join(p));
        cfg.scene = path("scene");
        cfg.map = path("map");
        cfg.ground_truth = path("ground_truth");
        cfg.output = path("output");
        macro_rules! parsed {
            ($($key:literal => $($field:ident).+),* $(,)?) => {$(
                if let Some(v) = kv.get_parsed($key).map_err(err)? {
                    cfg.$($field).+ = v;
                }
            )*};
        }
        parsed! {
            "voxel_size" => voxel_size,
            "truncation" => truncation,
            "frames" => frames,
            "keyframe_every" => keyframe_every,
            "anchors" => anchors,
            "sigma_px" => sigma_px,
            "odometry.sigma_t" => odometry.sigma_t,
            "odometry.scale" => odometry.scale,
            "seed" => seed,
            "structure_window" => structure_window,
            "max_range" => max_range,
            "localize" => localize,
            "alignment" => alignment,
        }
        if let Some(v) = kv.get_parsed::<f64>("odometry.sigma_r_deg").map_err(err)? {
            cfg.odometry.sigma_r = v.to_radians();
        }
        if let Some(v) = kv.get("map_min") {
            cfg.map_bounds.min = parse_vec3("map_min", v)?;
        }
        if let Some(v) = kv.get("map_max") {
            cfg.map_bounds.max = parse_vec3("map_max", v)?;
        }
        if let Some(v) = kv.get("initial.translation") {
            cfg.initial_translation = parse_vec3("initial.translation", v)?;
        }
        if let Some(v) = kv.get("initial.rotation_deg") {
            cfg.initial_rotation = parse_vec3("initial.rotation_deg", v)?.map(f64::to_radians);
        }
        if let Some(v) = kv.get("gauge") {
            cfg.gauge = match v {
                "map" => GaugeMode::SdfAnchored,
                "oldest" => GaugeMode::FixOldest,
                other => return Err(err(format!("gauge: expected 'map' or 'oldest', found '{other}'"))),
            };
        }
        if let Some(v) = kv.get("gradient") {
            cfg.gradient = match v {
                "blended" => GradientScheme::Blended,
                "trilinear" => GradientScheme::Trilinear,
                other => return Err(err(format!("gradient: expected 'blended' or 'trilinear', found '{other}'"))),
            };
        }
        if let Some(v) = kv.get("camera") {
            let n: Vec<f64> = v
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| err("camera: expected fx fy cx cy width height".into()))?;
            let [fx, fy, cx, cy, w, h] = n[..] else {
                return Err(err("camera: expected fx fy cx cy width height".into()));
            };
            cfg.camera = CameraIntrinsics::new(fx, fy, cx, cy, w as u32, h as u32)
                .map_err(|e| err(format!("camera: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let kv = KeyValues::parse(&text).map_err(PipelineError::Config)?;
        Self::from_key_values(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.keyframe_every == 0 {
            return err("keyframe_every must be at least 1");
        }
        if self.structure_window < 2 {
            return err("structure_window must be at least 2");
        }
        if !(self.voxel_size > 0.0) || !(self.truncation > 0.0) || !(self.max_range > 0.0) {
            return err("voxel_size, truncation and max_range must be positive");
        }
        if !(self.sigma_px >= 0.0) {
            return err("sigma_px must be non-negative");
        }
        if self.frames < 2 {
            return err("frames must be at least 2");
        }
        self.odometry.validate()?;
        self.solver.validate()?;
        for p in [&self.scene, &self.map, &self.ground_truth].into_iter().flatten() {
            if !p.exists() {
                return Err(PipelineError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn initial_error(&self) -> Option<Pose> {
        (self.initial_translation != Vector3::zeros() || self.initial_rotation != Vector3::zeros())
            .then(|| Pose::from_parts(exp_so3(&self.initial_rotation), self.initial_translation))
    }
}

/// Everything simulated for one run: scene, map, trajectories and tracks,
/// all at keyframe rate.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub scene: SyntheticScene,
    pub map: Arc<SdfMap>,
    pub ground_truth: Trajectory,
    pub odometry: Trajectory,
    pub tracks: TrackTable,
}

impl Sequence {
    pub fn simulate(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let map = Arc::new(Self::load_map(config)?);
        Self::simulate_with_map(config, map)
    }

    /// Loads the configured map or builds it from the scene.
    pub fn load_map(config: &PipelineConfig) -> Result<SdfMap, PipelineError> {
        let mut map = match &config.map {
            Some(path) => SdfMap::load(path)?,
            None => {
                let prims = scene_primitives(config)?;
                let params = MapParams::new(config.voxel_size).with_truncation(config.truncation);
                SdfMap::build_from_analytic(&prims, params, config.map_bounds)?
            }
        };
        map.set_gradient_scheme(config.gradient);
        Ok(map)
    }

    /// Simulates with an existing map, e.g. to share one map across a sweep.
    pub fn simulate_with_map(config: &PipelineConfig, map: Arc<SdfMap>) -> Result<Self, PipelineError> {
        config.validate()?;
        let prims = scene_primitives(config)?;
        let scene = SyntheticScene::sample(prims, &config.map_bounds, config.anchors, config.seed)?;
        let full = match &config.ground_truth {
            Some(path) => Trajectory::load(path)?,
            None => default_orbit(config.frames),
        };
        let noisy = corrupt_odometry(&full, &config.odometry, config.seed.wrapping_add(1))?;
        let ground_truth = full.subsample(config.keyframe_every);
        let odometry = noisy.subsample(config.keyframe_every);
        let tracks = generate_tracks(&scene, &ground_truth, &config.camera, config.sigma_px, config.seed.wrapping_add(2))?;
        Ok(Self {
            scene,
            map,
            ground_truth,
            odometry,
            tracks,
        })
    }
}

fn scene_primitives(config: &PipelineConfig) -> Result<Vec<Primitive>, PipelineError> {
    Ok(match &config.scene {
        Some(path) => load_scene(path)?,
        None => standard_room(),
    })
}

/// One revolution around the standard room, 0.1 s between frames.
pub fn default_orbit(frames: usize) -> Trajectory {
    Trajectory::orbit(frames, 1.5, 1.3, Vector3::new(0.0, 0.0, 0.3), 1.0, 0.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LandmarkState {
    position: Vector3<f64>,
    membership: Membership,
    sdf_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ate: AteResult,
    pub structure_rmse: Option<f64>,
    /// Structure RMSE of the same landmarks triangulated from the odometry
    /// trajectory alone, as a vision-only system would place them.
    pub structure_rmse_odometry: Option<f64>,
    pub inliers: usize,
    pub outliers: usize,
    pub sdf_deactivated: usize,
    pub vision_only: usize,
    pub not_converged: Vec<usize>,
    pub timing_ms: BTreeMap<String, f64>,
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6} m"));
        writeln!(s, "frames:                  {}", self.ate.frames.len()).unwrap();
        writeln!(s, "ATE translation RMSE:    {:.6} m", self.ate.translation_rmse).unwrap();
        writeln!(s, "ATE rotation RMSE:       {:.6} deg", self.ate.rotation_rmse_deg).unwrap();
        writeln!(s, "structure RMSE:          {}", opt(self.structure_rmse)).unwrap();
        writeln!(s, "structure RMSE (odom):   {}", opt(self.structure_rmse_odometry)).unwrap();
        writeln!(s, "landmarks kept/rejected: {}/{}", self.inliers, self.outliers).unwrap();
        writeln!(s, "SDF deactivated:         {}", self.sdf_deactivated).unwrap();
        writeln!(s, "vision-only landmarks:   {}", self.vision_only).unwrap();
        writeln!(s, "frames not converged:    {}", self.not_converged.len()).unwrap();
        for (stage, ms) in &self.timing_ms {
            writeln!(s, "time {stage:<20} {ms:.1} ms").unwrap();
        }
        s
    }

    pub fn frames_csv(&self) -> String {
        let mut s = String::from("timestamp,translation_error_m,rotation_error_deg\n");
        for f in &self.ate.frames {
            writeln!(s, "{:.9},{:.17e},{:.17e}", f.timestamp, f.translation, f.rotation_deg).unwrap();
        }
        s
    }

    pub fn frames_jsonl(&self) -> String {
        let mut s = String::new();
        for f in &self.ate.frames {
            s.push_str(&serde_json::to_string(f).expect("serializable"));
            s.push('\n');
        }
        s
    }
}

/// Parses a per-frame CSV written by [`EvaluationReport::frames_csv`].
pub fn parse_frames_csv(text: &str) -> Result<Vec<FrameError>, PipelineError> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| PipelineError::Config(format!("bad frame row '{l}': {e}")))?;
            match v[..] {
                [timestamp, translation, rotation_deg] => Ok(FrameError {
                    timestamp,
                    translation,
                    rotation_deg,
                }),
                _ => Err(PipelineError::Config(format!("bad frame row '{l}'"))),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub estimate: Trajectory,
    pub report: EvaluationReport,
    pub landmarks: BTreeMap<LandmarkId, Vector3<f64>>,
}

/// Simulates the configured sequence, localizes it and writes the outputs.
pub fn run_localization(config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    let sequence = Sequence::simulate(config)?;
    let out = localize_sequence(&sequence, config)?;
    if let Some(dir) = &config.output {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    out.estimate.save(&dir.join("trajectory.txt"))?;
    std::fs::write(dir.join("report.txt"), out.report.to_text())?;
    std::fs::write(dir.join("frames.csv"), out.report.frames_csv())?;
    std::fs::write(dir.join("frames.jsonl"), out.report.frames_jsonl())?;
    Ok(())
}

#[derive(Default)]
struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn record(&mut self, stage: &str, start: Instant) {
        *self.0.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64() * 1e3;
    }
}

struct Localizer<'a> {
    seq: &'a Sequence,
    config: &'a PipelineConfig,
    estimate: Vec<Pose>,
    landmarks: BTreeMap<LandmarkId, LandmarkState>,
    rejected: BTreeSet<LandmarkId>,
    not_converged: Vec<usize>,
    /// Metric scale of odometry-triangulated structure.
    structure_scale: f64,
    timer: Timer,
}

/// Runs the localization loop on a simulated sequence.
pub fn localize_sequence(seq: &Sequence, config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let mut loc = Localizer {
        seq,
        config,
        estimate: Vec::with_capacity(seq.odometry.len()),
        landmarks: BTreeMap::new(),
        rejected: BTreeSet::new(),
        not_converged: Vec::new(),
        structure_scale: 1.0,
        timer: Timer::default(),
    };
    for k in 0..seq.odometry.len() {
        loc.step(k)?;
    }
    loc.finish()
}

impl Localizer<'_> {
    fn predict(&self, k: usize) -> Pose {
        if k == 0 {
            let first = *self.seq.odometry.pose(0);
            return match self.config.initial_error() {
                Some(e) => Pose::from_parts(e.rotation * first.rotation, first.translation + e.translation),
                None => first,
            };
        }
        self.estimate[k - 1].compose(&self.seq.odometry.relative(k))
    }

    fn step(&mut self, k: usize) -> Result<(), PipelineError> {
        let predicted = self.predict(k);
        self.estimate.push(predicted);
        if !self.config.localize {
            return Ok(());
        }
        if self.config.solver.lambda > 0.0 {
            self.refine_pose(k, predicted)?;
        }
        let start = Instant::now();
        self.generate_landmarks(k);
        self.timer.record("generate_landmarks", start);
        self.optimize_window(k)?;
        self.update_structure_scale(k);
        Ok(())
    }

    /// Ratio of estimated to odometry path length over the structure window,
    /// once the window is full.
    fn update_structure_scale(&mut self, k: usize) {
        if k + 1 < self.config.structure_window {
            return;
        }
        let lo = k + 1 - self.config.structure_window;
        let (mut est, mut odo) = (0.0, 0.0);
        for j in lo + 1..=k {
            est += (self.estimate[j].translation - self.estimate[j - 1].translation).norm();
            odo += (self.seq.odometry.pose(j).translation - self.seq.odometry.pose(j - 1).translation).norm();
        }
        if odo > 0.0 && est > 0.0 {
            self.structure_scale = est / odo;
        }
    }

    fn alignment_energy(&self, pose: &Pose, points: &[Vector3<f64>]) -> f64 {
        let map = &self.seq.map;
        let loss = RobustLoss::new(self.config.solver.huber_delta);
        let scale = map.sigma_sdf().recip();
        points
            .iter()
            .map(|p| {
                let d = map.interpolate(&pose.transform_point(p)).map_or(map.truncation(), |q| q.distance.abs());
                loss.cost(scale * d)
            })
            .sum()
    }

    /// Aligns the first keyframe's local structure at each candidate scale
    /// and keeps the scale and pose of lowest energy, charging points outside
    /// the observed map as if they sat at the truncation distance.
    fn search_scale(&mut self, predicted: Pose, local: &[Vector3<f64>]) -> Pose {
        let mut best: Option<(f64, f64, Pose)> = None;
        for i in SCALE_STEPS {
            let scale = 2f64.powf(i as f64 / 16.0);
            let scaled: Vec<_> = local.iter().map(|p| p * scale).collect();
            let start = Instant::now();
            let refined = refine_pose(&self.seq.map, &predicted, &scaled, &self.config.solver);
            self.timer.record("refine_pose", start);
            if let Ok((pose, _)) = refined {
                let energy = self.alignment_energy(&pose, &scaled);
                if best.is_none_or(|(e, _, _)| energy < e) {
                    best = Some((energy, scale, pose));
                }
            }
        }
        match best {
            Some((_, scale, pose)) => {
                self.structure_scale = scale;
                pose
            }
            None => predicted,
        }
    }

    /// Aligns the local structure seen from keyframe `k` with the map.
    fn refine_pose(&mut self, k: usize, predicted: Pose) -> Result<(), PipelineError> {
        let start = Instant::now();
        let mut local = self.local_structure(k);
        self.timer.record("local_structure", start);
        let passes = if k == 0 { FIRST_FRAME_PASSES } else { 1 };
        let mut pose = predicted;
        if k == 0 {
            pose = self.search_scale(predicted, &local);
        }
        for p in &mut local {
            *p *= self.structure_scale;
        }
        let mut pose_ok = false;
        for _ in 0..passes {
            let start = Instant::now();
            let refined = refine_pose(&self.seq.map, &pose, &local, &self.config.solver);
            self.timer.record("refine_pose", start);
            match refined {
                Ok((refined, report)) => {
                    pose = refined;
                    pose_ok = report.converged();
                    if report.termination != Termination::MaxIterations {
                        break;
                    }
                }
                Err(SolverError::DegenerateProblem(msg)) => {
                    debug!("frame {k}: pose refinement skipped: {msg}");
                    break;
                }
                Err(e) => return Err(PipelineError::Frame { frame: k, source: e }),
            }
        }
        if !pose_ok {
            warn!("frame {k}: pose refinement did not converge");
            self.not_converged.push(k);
        }
        self.estimate[k] = pose;
        Ok(())
    }

    fn window(&self, k: usize, size: usize) -> std::ops::RangeInclusive<usize> {
        (k + 1).saturating_sub(size)..=k
    }

    /// Landmarks observed in keyframe `k`, triangulated in its camera frame
    /// from odometry-relative poses. Early keyframes borrow the first
    /// `structure_window` frames.
    fn local_structure(&self, k: usize) -> Vec<Vector3<f64>> {
        let n = self.seq.odometry.len();
        let w = self.config.structure_window;
        let lo = (k + 1).saturating_sub(w);
        let hi = k.max(w - 1).min(n - 1);
        let t_kw = self.seq.odometry.pose(k).inverse();
        let cam = &self.config.camera;
        let tracks = &self.seq.tracks;
        let mut points = Vec::new();
        for (id, px) in tracks.in_keyframe(k) {
            if self.rejected.contains(&id) {
                continue;
            }
            let mut rays = vec![(Vector3::zeros(), cam.back_project(&px).normalize())];
            for j in (lo..=hi).filter(|&j| j != k) {
                if let Some(pj) = tracks.get(id, j) {
                    let t_kj = t_kw.compose(self.seq.odometry.pose(j));
                    rays.push((t_kj.translation, (t_kj.rotation * cam.back_project(&pj)).normalize()));
                }
            }
            if let Ok((p, _)) = triangulate_midpoint(&rays) {
                points.push(p);
            }
        }
        points
    }

    fn generate_landmarks(&mut self, k: usize) {
        let poses: BTreeMap<KeyframeId, Pose> = self
            .window(k, self.config.structure_window)
            .map(|j| (j, self.estimate[j]))
            .collect();
        let new: Vec<_> = self
            .seq
            .tracks
            .in_keyframe(k)
            .filter(|(id, _)| !self.landmarks.contains_key(id) && !self.rejected.contains(id))
            .collect();
        for (id, px) in new {
            let generated = generate_landmark(
                &self.seq.map,
                &self.config.camera,
                k,
                &px,
                id,
                &self.seq.tracks,
                &poses,
                self.config.max_range,
            );
            if let Ok(g) = generated {
                self.landmarks.insert(
                    id,
                    LandmarkState {
                        position: g.position,
                        membership: g.membership,
                        sdf_active: true,
                    },
                );
            }
        }
    }

    /// Window problem over the last `solver.window` keyframes. With the
    /// map-anchored gauge every window pose is free as long as some SDF factor
    /// is in use; otherwise the oldest window keyframe is held fixed.
    fn build_problem(&self, k: usize) -> Result<Problem, SolverError> {
        let size = self.config.solver.window.unwrap_or(usize::MAX);
        let window: Vec<usize> = self.window(k, size).collect();
        let mut views: BTreeMap<LandmarkId, usize> = BTreeMap::new();
        for &j in &window {
            for (id, _) in self.seq.tracks.in_keyframe(j) {
                if self.landmarks.contains_key(&id) {
                    *views.entry(id).or_default() += 1;
                }
            }
        }
        let ids: Vec<LandmarkId> = views
            .into_iter()
            .filter(|&(_, n)| n >= MIN_WINDOW_VIEWS)
            .map(|(id, _)| id)
            .collect();
        let anchored = self.config.solver.lambda > 0.0
            && ids.iter().any(|id| {
                let lm = &self.landmarks[id];
                lm.membership == Membership::MapConstrained && lm.sdf_active
            });

        let mut problem = Problem::new(self.seq.map.clone(), self.config.camera, self.config.solver.lambda);
        problem.loss = RobustLoss::new(self.config.solver.huber_delta);
        problem.gauge = self.config.gauge;
        for (i, &j) in window.iter().enumerate() {
            let fixed = i == 0 && (self.config.gauge == GaugeMode::FixOldest || !anchored);
            problem.add_keyframe(j, self.estimate[j].inverse(), fixed)?;
        }
        // Older keyframes that saw a window landmark join as fixed poses so
        // long tracks keep their full baseline.
        let first = window[0];
        for id in &ids {
            for j in self.seq.tracks.keyframes_observing(*id).filter(|&j| j < first) {
                if !problem.keyframes().contains_key(&j) {
                    problem.add_keyframe(j, self.estimate[j].inverse(), true)?;
                }
            }
        }
        for id in ids {
            let lm = &self.landmarks[&id];
            problem.add_landmark(id, lm.position, lm.membership)?;
            if !lm.sdf_active {
                problem.deactivate_sdf(id);
            }
            for j in self.seq.tracks.keyframes_observing(id).filter(|&j| j <= k) {
                problem.add_observation(id, j, self.seq.tracks.get(id, j).expect("observed"))?;
            }
        }
        Ok(problem)
    }

    fn optimize_window(&mut self, k: usize) -> Result<(), PipelineError> {
        let frame_err = |source| PipelineError::Frame { frame: k, source };
        let mut problem = self.build_problem(k).map_err(frame_err)?;
        if problem.landmarks().is_empty() {
            return Ok(());
        }
        let start = Instant::now();
        let structure = refine_structure(&mut problem, &self.config.solver).map_err(frame_err)?;
        self.timer.record("refine_structure", start);
        let mut migrated = structure.migrated;
        let mut rejected = Vec::new();
        let mut deactivated = Vec::new();
        if problem.keyframes().len() >= 2 {
            let unanchored = !problem.keyframes().values().any(|kf| kf.fixed) && problem.sdf_in_use().next().is_none();
            if unanchored {
                problem.set_keyframe_fixed(*problem.keyframes().keys().next().expect("non-empty"), true);
            }
            let start = Instant::now();
            let joint = joint_optimize(&mut problem, &self.config.solver).map_err(frame_err)?;
            self.timer.record("joint_optimize", start);
            if !joint.converged() {
                debug!("frame {k}: joint optimization stopped with {:?}", joint.termination);
            }
            migrated.extend(joint.migrated);
            rejected = joint.outliers_removed;
            deactivated = joint.sdf_deactivated;
            for (id, kf) in problem.keyframes() {
                if !kf.fixed {
                    self.estimate[*id] = kf.pose.inverse().renormalized();
                }
            }
        }
        for (id, lm) in problem.landmarks() {
            if let Some(state) = self.landmarks.get_mut(id) {
                state.position = lm.position;
            }
        }
        for id in migrated {
            if let Some(state) = self.landmarks.get_mut(&id) {
                state.membership = Membership::VisionOnly;
            }
        }
        for id in deactivated {
            if let Some(state) = self.landmarks.get_mut(&id) {
                state.sdf_active = false;
            }
        }
        for id in rejected {
            self.landmarks.remove(&id);
            self.rejected.insert(id);
        }
        Ok(())
    }

    /// Kept landmarks triangulated from every observing keyframe at its
    /// odometry pose.
    fn odometry_structure(&self) -> Vec<Vector3<f64>> {
        let cam = &self.config.camera;
        self.landmarks
            .keys()
            .filter_map(|&id| {
                let rays: Vec<_> = self
                    .seq
                    .tracks
                    .keyframes_observing(id)
                    .map(|j| {
                        let pose = self.seq.odometry.pose(j);
                        let px = self.seq.tracks.get(id, j).expect("observed");
                        (pose.translation, (pose.rotation * cam.back_project(&px)).normalize())
                    })
                    .collect();
                triangulate_midpoint(&rays).ok().map(|(p, _)| p)
            })
            .collect()
    }

    fn finish(self) -> Result<RunOutput, PipelineError> {
        let odometry = self.odometry_structure();
        let estimate = self.seq.odometry.with_poses(self.estimate)?;
        let ate = compute_ate(&estimate, &self.seq.ground_truth, self.config.alignment)?;
        let current: Vec<_> = self.landmarks.values().map(|l| l.position).collect();
        let reference = StructureReference::Scene(&self.seq.scene.primitives);
        let report = EvaluationReport {
            ate,
            structure_rmse: (!current.is_empty()).then(|| compute_structure_rmse(&current, reference)),
            structure_rmse_odometry: (!odometry.is_empty()).then(|| compute_structure_rmse(&odometry, reference)),
            inliers: self.landmarks.len(),
            outliers: self.rejected.len(),
            sdf_deactivated: self.landmarks.values().filter(|l| !l.sdf_active).count(),
            vision_only: self.landmarks.values().filter(|l| l.membership == Membership::VisionOnly).count(),
            not_converged: self.not_converged,
            timing_ms: self.timer.0,
        };
        info!(
            "ATE {:.4} m / {:.3} deg over {} frames",
            report.ate.translation_rmse,
            report.ate.rotation_rmse_deg,
            report.ate.frames.len()
        );
        Ok(RunOutput {
            estimate,
            report,
            landmarks: self.landmarks.into_iter().map(|(id, l)| (id, l.position)).collect(),
        })
    }
}

/// One (magnitude, seed) run of a perturbation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub translation: f64,
    pub rotation_deg: f64,
    pub seed: u64,
    /// `None` when the run failed.
    pub ate: Option<f64>,
    pub not_converged_frames: usize,
    pub error: Option<String>,
}

/// Summary of one sweep magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub translation: f64,
    pub rotation_deg: f64,
    pub runs: usize,
    pub failures: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

/// Offsets the first pose by `t` meters along `axis` and `r` degrees about
/// it for every `(t, r)` in `magnitudes` and every seed. Failing runs are
/// recorded and the sweep continues.
pub fn perturbation_sweep(
    config: &PipelineConfig,
    axis: &Vector3<f64>,
    magnitudes: &[(f64, f64)],
    seeds: &[u64],
) -> Result<Vec<SweepEntry>, PipelineError> {
    if magnitudes.is_empty() || seeds.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one magnitude and one seed".into()));
    }
    let axis = axis.try_normalize(1e-12).ok_or_else(|| PipelineError::Config("zero sweep axis".into()))?;
    let map = Arc::new(Sequence::load_map(config)?);
    let run_seed = |seed: u64| -> Result<Vec<SweepEntry>, PipelineError> {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let seq = Sequence::simulate_with_map(&cfg, map.clone())?;
        let mut entries = Vec::new();
        for &(t, r) in magnitudes {
            cfg.initial_translation = axis * t;
            cfg.initial_rotation = axis * r.to_radians();
            let entry = match localize_sequence(&seq, &cfg) {
                Ok(out) => SweepEntry {
                    translation: t,
                    rotation_deg: r,
                    seed,
                    ate: Some(out.report.ate.translation_rmse),
                    not_converged_frames: out.report.not_converged.len(),
                    error: None,
                },
                Err(e) => {
                    warn!("sweep cell {t} m / {r} deg, seed {seed}: {e}");
                    SweepEntry {
                        translation: t,
                        rotation_deg: r,
                        seed,
                        ate: None,
                        not_converged_frames: 0,
                        error: Some(e.to_string()),
                    }
                }
            };
            entries.push(entry);
        }
        Ok(entries)
    };
    // Seeds are independent; results are gathered in seed order.
    let per_seed: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&seed| scope.spawn(move || run_seed(seed))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut entries = Vec::new();
    for result in per_seed {
        entries.extend(result?);
    }
    Ok(entries)
}

pub fn summarize_sweep(entries: &[SweepEntry]) -> Vec<SweepCell> {
    let mut groups: Vec<((f64, f64), Vec<&SweepEntry>)> = Vec::new();
    for e in entries {
        let key = (e.translation, e.rotation_deg);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(e),
            None => groups.push((key, vec![e])),
        }
    }
    groups
        .into_iter()
        .map(|((translation, rotation_deg), runs)| {
            let ates: Vec<f64> = runs.iter().filter_map(|e| e.ate).collect();
            let n = ates.len().max(1) as f64;
            let mean = ates.iter().sum::<f64>() / n;
            let std = (ates.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            SweepCell {
                translation,
                rotation_deg,
                runs: runs.len(),
                failures: runs.len() - ates.len(),
                mean,
                std,
                max: ates.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect()
}

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s = String::from("translation_m,rotation_deg,seed,ate_m,not_converged_frames,status\n");
    for e in entries {
        let ate = e.ate.map_or(String::new(), |a| format!("{a:.9}"));
        let status = e.error.as_deref().map_or("ok".to_string(), |m| format!("\"{}\"", m.replace('"', "'")));
        writeln!(s, "{},{},{},{ate},{},{status}", e.translation, e.rotation_deg, e.seed, e.not_converged_frames).unwrap();
    }
    s
}

/// Recomputes the RMSE of a per-frame error list.
pub fn frames_rmse(frames: &[FrameError]) -> (f64, f64) {
    (
        rmse(frames.iter().map(|f| f.translation)),
        rmse(frames.iter().map(|f| f.rotation_deg)),
    )
}
