//! Metrics, procedural benchmark scenes, seeded experiments and the
//! on-disk dataset adapter.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::ResponseCurve;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Pose, Vec3};
use crate::io::{read_depth_pfm, write_depth_pfm, write_pfm, FloatImage};
use crate::nbv::{
    active_loop, hemisphere_candidates, MeasurementSource, NbvOptions, Planner, Policy, SimulatedSource, StopCriteria,
    Trajectory, ViewpointCandidate,
};
use crate::refine::{build_measurement_set, icp_refine_baseline, refine, MeasurementSet, RefineOptions};
use crate::render::{
    visibility, BsdfParams, CaptureNoise, PointLight, PredictionSettings, SceneDescription, SceneObject, Shape,
};
use crate::sdf::{build_sdf, default_voxel_size, SdfGrid, TriangleMesh, DEFAULT_PADDING_VOXELS};
use crate::uncertainty::DepthMap;

/// Translation error (mm) and rotation error (degrees) between two
/// `world_from_object` poses.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let dt = (estimate.translation() - truth.translation()).norm();
    let r = estimate.rotation().transpose() * truth.rotation();
    // atan2 keeps precision near zero where acos does not.
    let sin = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    let cos = (r.trace() - 1.0) * 0.5;
    (dt, sin.atan2(cos).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetric {
    pub trans_thresh: f64,
    pub rot_thresh: f64,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub rate: f64,
}

impl DetectionMetric {
    pub fn from_errors(errors: &[(f64, f64)], trans_thresh: f64, rot_thresh: f64) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Contract("detection rate over an empty result list".into()));
        }
        let correct = errors
            .iter()
            .filter(|(t, r)| *t <= trans_thresh && *r <= rot_thresh)
            .count();
        Ok(Self {
            trans_thresh,
            rot_thresh,
            correct,
            total: errors.len(),
            rate: 100.0 * correct as f64 / errors.len() as f64,
        })
    }
}

/// Share of `(estimate, truth)` pairs within both thresholds.
pub fn evaluate_detection(results: &[(Pose, Pose)], trans_thresh: f64, rot_thresh: f64) -> Result<DetectionMetric> {
    let errors: Vec<(f64, f64)> = results.iter().map(|(e, t)| pose_error(e, t)).collect();
    DetectionMetric::from_errors(&errors, trans_thresh, rot_thresh)
}

/// Parses `"5,5"` into (mm, degrees).
pub fn parse_metric(text: &str) -> Result<(f64, f64)> {
    let mut it = text.split(',').map(|s| s.trim().parse::<f64>());
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(t)), Some(Ok(r)), None) if t > 0.0 && r > 0.0 => Ok((t, r)),
        _ => Err(Error::Config(format!("metric must look like '5,5', got '{text}'"))),
    }
}

/// Offset with a uniformly random axis and direction and magnitudes
/// uniform in `[0, max]`, applied about the object origin.
pub fn perturb_pose(world_from_object: &Pose, max_translation: f64, max_rotation: f64, rng: &mut impl Rng) -> Pose {
    let t = random_unit(rng) * rng.random_range(0.0..=max_translation);
    let w = random_unit(rng) * rng.random_range(0.0..=max_rotation);
    let r = Pose::from_axis_angle(w, Vec3::zeros());
    Pose::from_parts_unchecked(
        r.rotation() * world_from_object.rotation(),
        world_from_object.translation() + t,
    )
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkKind {
    LBracket,
    Cube,
    VGroove,
    Sphere,
    GlossyPart,
}

impl BenchmarkKind {
    pub const ALL: [BenchmarkKind; 5] = [
        BenchmarkKind::LBracket,
        BenchmarkKind::Cube,
        BenchmarkKind::VGroove,
        BenchmarkKind::Sphere,
        BenchmarkKind::GlossyPart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkKind::LBracket => "l-bracket",
            BenchmarkKind::Cube => "cube",
            BenchmarkKind::VGroove => "v-groove",
            BenchmarkKind::Sphere => "sphere",
            BenchmarkKind::GlossyPart => "glossy-part",
        }
    }

    pub fn shape(self) -> Shape {
        match self {
            BenchmarkKind::LBracket => Shape::LBracket,
            BenchmarkKind::Cube => Shape::Cuboid { size: [40.0; 3] },
            BenchmarkKind::VGroove => Shape::VGroove {
                width: 60.0,
                height: 30.0,
                groove_depth: 20.0,
                length: 50.0,
            },
            BenchmarkKind::Sphere => Shape::Icosphere {
                radius: 25.0,
                subdivisions: 3,
            },
            BenchmarkKind::GlossyPart => Shape::GroovedBlock,
        }
    }
}

impl std::str::FromStr for BenchmarkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchmarkKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown benchmark kind '{s}'")))
    }
}

/// Surface presets from diffuse to mirror-like.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaterialPreset {
    Matte,
    Satin,
    Glossy,
    Chrome,
}

impl MaterialPreset {
    pub const ALL: [MaterialPreset; 4] = [
        MaterialPreset::Matte,
        MaterialPreset::Satin,
        MaterialPreset::Glossy,
        MaterialPreset::Chrome,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaterialPreset::Matte => "matte",
            MaterialPreset::Satin => "satin",
            MaterialPreset::Glossy => "glossy",
            MaterialPreset::Chrome => "chrome",
        }
    }

    pub fn params(self) -> BsdfParams {
        match self {
            MaterialPreset::Matte => BsdfParams::matte(),
            MaterialPreset::Satin => BsdfParams::from_array([0.7, 0.3, 0.4, 0.5]),
            MaterialPreset::Glossy => BsdfParams::from_array([0.8, 0.8, 0.15, 0.5]),
            MaterialPreset::Chrome => BsdfParams::chrome(),
        }
    }
}

impl std::str::FromStr for MaterialPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaterialPreset::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown material preset '{s}'")))
    }
}

/// Sensor used by the benchmarks: 128×96 pixels, f = 300 px, 40 mm baseline.
pub fn default_camera() -> CameraModel {
    CameraModel::new(300.0, 300.0, 63.5, 47.5, 128, 96, 40.0).expect("valid camera")
}

/// Projector midway between the two cameras.
pub fn default_light() -> PointLight {
    PointLight {
        position: [20.0, 0.0, 0.0],
        intensity: 1e6,
    }
}

pub const BIN_SIZE: [f64; 3] = [240.0, 240.0, 50.0];
pub const WORK_DISTANCE: f64 = 400.0;

#[derive(Debug, Clone)]
pub struct BenchmarkScene {
    pub scene: SceneDescription,
    /// Index of the target object.
    pub object: usize,
    /// Ground-truth `world_from_object` of the target.
    pub truth: Pose,
}

/// Places `mesh` (posed by `rotation` about its origin, then yawed) so it
/// rests on the floor at `(x, y)`.
fn rest_on_floor(mesh: &TriangleMesh, rotation: &Pose, yaw: f64, x: f64, y: f64) -> Pose {
    let r = Pose::from_axis_angle(Vec3::new(0.0, 0.0, yaw), Vec3::zeros()).compose(rotation);
    let min_z = mesh
        .vertices()
        .iter()
        .map(|v| r.transform_point(v).z)
        .fold(f64::INFINITY, f64::min);
    Pose::from_parts_unchecked(*r.rotation(), Vec3::new(x, y, -min_z))
}

/// A target resting in an open matte bin, seen from above. The glossy
/// part gets a matte block beside it as clutter.
pub fn generate_benchmark_scene(kind: BenchmarkKind, preset: MaterialPreset, seed: u64) -> Result<BenchmarkScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bin_material = BsdfParams::from_array([0.5, 0.0, 0.9, 0.3]);
    let bin = SceneObject::new(
        "bin",
        Shape::Bin {
            size: BIN_SIZE,
            wall: 6.0,
        },
        Pose::identity(),
        bin_material,
    )?;
    let shape = kind.shape();
    let mesh = shape.build(None)?;
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (x, y) = (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
    // Stand the profile upright so the channel opens towards the sensor.
    let stance = match kind {
        BenchmarkKind::GlossyPart => {
            Pose::from_axis_angle(Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0), Vec3::zeros())
        }
        _ => Pose::identity(),
    };
    let truth = rest_on_floor(&mesh, &stance, yaw, x, y);
    let target = SceneObject::new(kind.name(), shape, truth, preset.params())?;
    let mut objects = vec![target, bin];
    if kind == BenchmarkKind::GlossyPart {
        let side = rng.random_range(0.0..std::f64::consts::TAU);
        let block = Shape::Cuboid {
            size: [30.0, 30.0, 45.0],
        };
        let block_mesh = block.build(None)?;
        let at = Vec3::new(x, y, 0.0) + Vec3::new(side.cos(), side.sin(), 0.0) * 60.0;
        let pose = rest_on_floor(&block_mesh, &Pose::identity(), side, at.x, at.y);
        objects.push(SceneObject::new("block", block, pose, BsdfParams::matte())?);
    }
    let scene = SceneDescription {
        objects,
        light: default_light(),
        ambient: 0.0,
        camera: default_camera(),
        world_from_camera: Pose::look_at(Vec3::new(0.0, 0.0, WORK_DISTANCE), Vec3::zeros(), Vec3::y())?,
    };
    Ok(BenchmarkScene {
        scene,
        object: 0,
        truth,
    })
}

/// SDF of a scene object's mesh at the default resolution.
pub fn object_sdf(scene: &SceneDescription, object: usize) -> Result<SdfGrid> {
    let mesh = &scene.objects[object].mesh;
    build_sdf(mesh, default_voxel_size(mesh), DEFAULT_PADDING_VOXELS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub max_translation: f64,
    pub max_rotation_deg: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            max_translation: 30.0,
            max_rotation_deg: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateOptions {
    pub count: usize,
    pub radius: f64,
    pub min_elevation_deg: f64,
}

impl Default for CandidateOptions {
    fn default() -> Self {
        Self {
            count: 40,
            radius: WORK_DISTANCE,
            min_elevation_deg: 35.0,
        }
    }
}

impl CandidateOptions {
    pub fn build(&self) -> Result<Vec<ViewpointCandidate>> {
        hemisphere_candidates(
            &Vec3::zeros(),
            self.radius,
            self.count,
            self.min_elevation_deg.to_radians(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    pub kind: BenchmarkKind,
    pub preset: MaterialPreset,
    /// Use this scene file instead of a generated benchmark scene.
    pub scene: Option<PathBuf>,
    /// Target object name in `scene`; the first object by default.
    pub object: Option<String>,
    /// Active-loop policies to compare on the same trials.
    pub policies: Vec<Policy>,
    /// When non-empty, skip the active loop and refine (and run ICP) from
    /// these candidate ids.
    pub fixed_views: Vec<usize>,
    pub stop: StopCriteria,
    /// Every policy takes the highest candidate view first.
    pub start_overhead: bool,
    pub refine: RefineOptions,
    pub prediction: PredictionSettings,
    pub nbv: NbvOptions,
    pub noise: CaptureNoise,
    pub perturbation: Perturbation,
    pub candidates: CandidateOptions,
    /// Trials whose target is less visible than this from the nominal view
    /// are excluded from the rates.
    pub min_visibility: f64,
    pub response_gamma: f64,
    /// `(mm, degrees)` thresholds reported in the plot CSV.
    pub metrics: Vec<(f64, f64)>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            kind: BenchmarkKind::GlossyPart,
            preset: MaterialPreset::Glossy,
            scene: None,
            object: None,
            policies: vec![Policy::Nbv, Policy::Random, Policy::MaxDistance],
            fixed_views: Vec::new(),
            stop: StopCriteria {
                entropy_threshold: f64::NEG_INFINITY,
                max_views: 5,
            },
            start_overhead: true,
            refine: RefineOptions {
                max_iters: 200,
                ..RefineOptions::default()
            },
            prediction: PredictionSettings::default(),
            nbv: NbvOptions::default(),
            noise: CaptureNoise::default(),
            perturbation: Perturbation::default(),
            candidates: CandidateOptions::default(),
            min_visibility: 0.8,
            response_gamma: 2.2,
            metrics: vec![(5.0, 5.0), (2.0, 2.0)],
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(scene), Some(dir)) = (&cfg.scene, path.parent()) {
            if scene.is_relative() {
                cfg.scene = Some(dir.join(scene));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if self.fixed_views.is_empty() && self.policies.is_empty() {
            return Err(Error::Config("no policy and no fixed views to run".into()));
        }
        if self.stop.max_views == 0 {
            return Err(Error::Config("max_views must be positive".into()));
        }
        if self.metrics.iter().any(|(t, r)| !(*t > 0.0 && *r > 0.0)) {
            return Err(Error::Config("metric thresholds must be positive".into()));
        }
        if !(self.response_gamma > 0.0) {
            return Err(Error::Config("response_gamma must be positive".into()));
        }
        Ok(())
    }

    /// Seed of trial `k`, independent of how many trials run.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial as u64 + 1);
        rng.random()
    }

    fn trial_scene(&self, seed: u64) -> Result<BenchmarkScene> {
        match &self.scene {
            None => generate_benchmark_scene(self.kind, self.preset, seed),
            Some(path) => {
                let scene = SceneDescription::load(path)?;
                let object = match &self.object {
                    None => 0,
                    Some(name) => scene
                        .object_index(name)
                        .ok_or_else(|| Error::Config(format!("no object named '{name}' in the scene")))?,
                };
                if scene.objects.is_empty() {
                    return Err(Error::Config("scene has no objects".into()));
                }
                let truth = scene.objects[object].world_from_object;
                Ok(BenchmarkScene { scene, object, truth })
            }
        }
    }
}

/// One estimator or policy run on one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRun {
    pub trial: usize,
    pub seed: u64,
    /// Policy name, or `refine` / `icp` in fixed-view mode.
    pub method: String,
    pub visibility: f64,
    pub excluded: bool,
    /// Pose errors after each view.
    pub errors: Vec<(f64, f64)>,
    pub trajectory: Option<Trajectory>,
    pub error: Option<String>,
}

impl TrialRun {
    pub fn views_to_success(&self, t: f64, r: f64) -> Option<usize> {
        self.errors.iter().position(|&(a, b)| a <= t && b <= r).map(|k| k + 1)
    }

    /// Success after `views` views; the last estimate carries forward.
    pub fn success_at(&self, views: usize, t: f64, r: f64) -> bool {
        match self.errors.get(views.min(self.errors.len()).wrapping_sub(1)) {
            Some(&(a, b)) => a <= t && b <= r,
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub trials: usize,
    /// Mean views to the first metric; trials that never succeed count as
    /// `max_views + 1`.
    pub mean_views_to_success: f64,
    /// Detection rate (percent) per metric after 1..=max_views views.
    pub rates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub runs: Vec<TrialRun>,
    pub summaries: Vec<MethodSummary>,
}

impl ExperimentReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

fn methods(config: &RunConfig) -> Vec<String> {
    if config.fixed_views.is_empty() {
        config.policies.iter().map(|p| p.name().to_string()).collect()
    } else {
        vec!["refine".into(), "icp".into()]
    }
}

struct TrialContext<'a> {
    config: &'a RunConfig,
    response: &'a ResponseCurve,
    candidates: &'a [ViewpointCandidate],
    grids: &'a HashMap<u64, SdfGrid>,
}

fn run_trial(ctx: &TrialContext, trial: usize) -> Vec<TrialRun> {
    let config = ctx.config;
    let seed = config.trial_seed(trial);
    let failed = |msg: String| -> Vec<TrialRun> {
        methods(config)
            .into_iter()
            .map(|method| TrialRun {
                trial,
                seed,
                method,
                visibility: 0.0,
                excluded: true,
                errors: Vec::new(),
                trajectory: None,
                error: Some(msg.clone()),
            })
            .collect()
    };
    let bench = match config.trial_scene(seed) {
        Ok(b) => b,
        Err(e) => return failed(e.to_string()),
    };
    let Some(grid) = ctx.grids.get(&bench.scene.objects[bench.object].mesh.fingerprint()) else {
        return failed("missing SDF".into());
    };
    let vis = visibility(&bench.scene, bench.object);
    let excluded = vis < config.min_visibility;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let initial = perturb_pose(
        &bench.truth,
        config.perturbation.max_translation,
        config.perturbation.max_rotation_deg.to_radians(),
        &mut rng,
    );
    let source = |rng_seed: u64| SimulatedSource {
        scene: &bench.scene,
        object: bench.object,
        settings: config.prediction,
        response: ctx.response,
        noise: config.noise,
        stride: config.nbv.stride,
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
    };
    let run =
        |method: String, errors: Vec<(f64, f64)>, trajectory: Option<Trajectory>, error: Option<String>| TrialRun {
            trial,
            seed,
            method,
            visibility: vis,
            excluded,
            errors,
            trajectory,
            error,
        };

    if !config.fixed_views.is_empty() {
        let mut src = source(seed ^ 0x5eed_0002);
        let mut sets: Vec<MeasurementSet> = Vec::new();
        let mut problems = Vec::new();
        for id in &config.fixed_views {
            match ctx.candidates.iter().find(|c| c.id == *id) {
                Some(c) => match src.acquire(c) {
                    Ok(s) => sets.push(s),
                    Err(e) => problems.push(e.to_string()),
                },
                None => problems.push(format!("no candidate {id}")),
            }
        }
        let error = (!problems.is_empty()).then(|| problems.join("; "));
        if sets.is_empty() {
            return failed(error.unwrap_or_default());
        }
        let init = initial.inverse();
        let sdf = refine(&sets, &init, grid, &config.refine);
        let icp = icp_refine_baseline(&sets, &init, &bench.scene.objects[bench.object].mesh, &config.refine);
        return vec![
            run(
                "refine".into(),
                vec![pose_error(&sdf.pose.inverse(), &bench.truth)],
                None,
                error.clone(),
            ),
            run(
                "icp".into(),
                vec![pose_error(&icp.pose.inverse(), &bench.truth)],
                None,
                error,
            ),
        ];
    }

    let first_view = config
        .start_overhead
        .then(|| overhead_candidate(ctx.candidates))
        .flatten();
    config
        .policies
        .iter()
        .map(|&policy| {
            let planner = Planner {
                scene: &bench.scene,
                object: bench.object,
                grid,
                settings: config.prediction,
                response: ctx.response,
                options: config.nbv,
            };
            let mut src = source(seed ^ 0x5eed_0002);
            match active_loop(
                &planner,
                ctx.candidates,
                &mut src,
                &initial.inverse(),
                &config.stop,
                policy,
                &config.refine,
                first_view,
                seed,
            ) {
                Ok(traj) => {
                    let errors = traj
                        .steps
                        .iter()
                        .map(|s| (s.trans_err.unwrap_or(f64::INFINITY), s.rot_err.unwrap_or(f64::INFINITY)))
                        .collect();
                    run(policy.name().into(), errors, Some(traj), None)
                }
                Err(e) => run(policy.name().into(), Vec::new(), None, Some(e.to_string())),
            }
        })
        .collect()
}

/// Id of the candidate with the highest camera centre.
pub fn overhead_candidate(candidates: &[ViewpointCandidate]) -> Option<usize> {
    candidates
        .iter()
        .max_by(|a, b| {
            a.pose
                .translation()
                .z
                .total_cmp(&b.pose.translation().z)
                .then(b.id.cmp(&a.id))
        })
        .map(|c| c.id)
}

/// Runs every trial of `config` (in parallel across trials) and aggregates
/// the detection rates. Trial failures are recorded, not raised.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let response = ResponseCurve::gamma(config.response_gamma);
    let candidates = config.candidates.build()?;
    // One SDF per distinct target mesh.
    let mut grids = HashMap::new();
    for trial in 0..config.trials {
        let bench = config.trial_scene(config.trial_seed(trial))?;
        let key = bench.scene.objects[bench.object].mesh.fingerprint();
        if let std::collections::hash_map::Entry::Vacant(e) = grids.entry(key) {
            e.insert(object_sdf(&bench.scene, bench.object)?);
        }
        if config.scene.is_some() {
            break;
        }
    }
    let ctx = TrialContext {
        config,
        response: &response,
        candidates: &candidates,
        grids: &grids,
    };
    let runs: Vec<TrialRun> = (0..config.trials)
        .into_par_iter()
        .flat_map_iter(|t| run_trial(&ctx, t))
        .collect();
    let views = if config.fixed_views.is_empty() {
        config.stop.max_views
    } else {
        1
    };
    let summaries = methods(config)
        .into_iter()
        .map(|method| {
            let kept: Vec<&TrialRun> = runs.iter().filter(|r| r.method == method && !r.excluded).collect();
            let n = kept.len().max(1) as f64;
            let (t0, r0) = config.metrics.first().copied().unwrap_or((5.0, 5.0));
            let mean_views = kept
                .iter()
                .map(|r| r.views_to_success(t0, r0).unwrap_or(views + 1) as f64)
                .sum::<f64>()
                / n;
            let rates = config
                .metrics
                .iter()
                .map(|&(t, r)| {
                    (1..=views)
                        .map(|v| 100.0 * kept.iter().filter(|run| run.success_at(v, t, r)).count() as f64 / n)
                        .collect()
                })
                .collect();
            MethodSummary {
                method,
                trials: kept.len(),
                mean_views_to_success: mean_views,
                rates,
            }
        })
        .collect();
    Ok(ExperimentReport {
        config: config.clone(),
        runs,
        summaries,
    })
}

fn metric_label(t: f64, r: f64) -> String {
    format!("{t}_{r}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Writes `trajectory.jsonl` (with wall time), `summary.csv` and
/// `plot.csv` into `dir`. The CSV files depend only on config and seed.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = &report.config.metrics;

    let path = dir.join("trajectory.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for run in &report.runs {
        if let Some(traj) = &run.trajectory {
            let mut buf = Vec::new();
            traj.write_jsonl(&mut buf, true).map_err(|e| Error::io(&path, e))?;
            for line in String::from_utf8_lossy(&buf).lines() {
                let mut v: serde_json::Value = serde_json::from_str(line).expect("valid line");
                v["trial"] = run.trial.into();
                v["seed"] = run.seed.into();
                writeln!(out, "{v}").map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec![
        "trial".to_string(),
        "seed".into(),
        "method".into(),
        "visibility".into(),
        "excluded".into(),
        "views".into(),
        "final_trans_err".into(),
        "final_rot_err".into(),
    ];
    header.extend(metrics.iter().map(|&(t, r)| format!("views_to_{}", metric_label(t, r))));
    header.push("error".into());
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for run in &report.runs {
        let (ft, fr) = run.errors.last().copied().unwrap_or((f64::NAN, f64::NAN));
        let mut row = vec![
            run.trial.to_string(),
            run.seed.to_string(),
            run.method.clone(),
            format!("{:.4}", run.visibility),
            run.excluded.to_string(),
            run.errors.len().to_string(),
            format!("{ft:.6}"),
            format!("{fr:.6}"),
        ];
        row.extend(
            metrics
                .iter()
                .map(|&(t, r)| run.views_to_success(t, r).map_or(String::new(), |v| v.to_string())),
        );
        row.push(run.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("plot.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["method".to_string(), "views".into(), "trials".into()];
    header.extend(metrics.iter().map(|&(t, r)| format!("rate_{}", metric_label(t, r))));
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for s in &report.summaries {
        let views = s.rates.first().map_or(0, Vec::len);
        for v in 0..views {
            let mut row = vec![s.method.clone(), (v + 1).to_string(), s.trials.to_string()];
            row.extend(s.rates.iter().map(|r| format!("{:.2}", r[v])));
            w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Recorded captures on disk:
///
/// * `camera.json`: the [`CameraModel`];
/// * `views.json`: `[{"id", "depth", "variance"?, "world_from_camera"}]`
///   with PFM depth (mm) paths relative to the directory and 16 row-major
///   pose values;
/// * `truth.json` (optional): `{"world_from_object": [16 values]}`.
pub struct DatasetSource {
    pub camera: CameraModel,
    pub views: Vec<DatasetView>,
    pub truth: Option<Pose>,
    /// Depth variance (mm²) for views without a variance map.
    pub default_variance: f64,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetView {
    pub id: usize,
    pub depth: PathBuf,
    #[serde(default)]
    pub variance: Option<PathBuf>,
    #[serde(with = "row_major")]
    pub world_from_camera: Pose,
}

mod row_major {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::geometry::Pose;

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(p.to_row_major())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Pose::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

impl DatasetSource {
    pub fn open(dir: &Path, default_variance: f64, stride: usize) -> Result<Self> {
        let camera: CameraModel = read_json(&dir.join("camera.json"))?;
        camera.validate()?;
        let mut views: Vec<DatasetView> = read_json(&dir.join("views.json"))?;
        for v in &mut views {
            v.depth = dir.join(&v.depth);
            v.variance = v.variance.as_ref().map(|p| dir.join(p));
        }
        let truth_path = dir.join("truth.json");
        let truth = if truth_path.exists() {
            #[derive(Deserialize)]
            struct Truth {
                #[serde(with = "row_major")]
                world_from_object: Pose,
            }
            Some(read_json::<Truth>(&truth_path)?.world_from_object)
        } else {
            None
        };
        Ok(Self {
            camera,
            views,
            truth,
            default_variance,
            stride,
        })
    }

    pub fn candidates(&self) -> Vec<ViewpointCandidate> {
        self.views
            .iter()
            .map(|v| ViewpointCandidate::new(v.id, v.world_from_camera))
            .collect()
    }

    /// Writes a dataset directory in the layout [`DatasetSource::open`]
    /// reads.
    pub fn write(
        dir: &Path,
        camera: &CameraModel,
        views: &[(DatasetView, DepthMap)],
        truth: Option<&Pose>,
    ) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write_json = |name: &str, v: serde_json::Value| {
            let p = dir.join(name);
            std::fs::write(&p, serde_json::to_string_pretty(&v).expect("json")).map_err(|e| Error::io(&p, e))
        };
        write_json("camera.json", serde_json::to_value(camera).expect("json"))?;
        for (view, depth) in views {
            match &view.variance {
                Some(var) => write_depth_pfm(&dir.join(&view.depth), &dir.join(var), depth)?,
                None => write_pfm(
                    &dir.join(&view.depth),
                    &FloatImage {
                        width: depth.width(),
                        height: depth.height(),
                        values: depth.depth().iter().map(|&v| v as f32).collect(),
                    },
                )?,
            }
        }
        let list: Vec<&DatasetView> = views.iter().map(|(v, _)| v).collect();
        write_json("views.json", serde_json::to_value(list).expect("json"))?;
        if let Some(t) = truth {
            write_json(
                "truth.json",
                serde_json::json!({ "world_from_object": t.to_row_major() }),
            )?;
        }
        Ok(())
    }
}

impl MeasurementSource for DatasetSource {
    fn acquire(&mut self, view: &ViewpointCandidate) -> Result<MeasurementSet> {
        let v = self
            .views
            .iter()
            .find(|v| v.id == view.id)
            .ok_or_else(|| Error::Config(format!("no recorded view {}", view.id)))?;
        let depth = read_depth_pfm(&v.depth, v.variance.as_deref(), self.default_variance)?;
        if depth.width() != self.camera.width || depth.height() != self.camera.height {
            return Err(Error::Dimension(format!(
                "view {} does not match the camera size",
                v.id
            )));
        }
        let mask = vec![true; depth.len()];
        build_measurement_set(&depth, &mask, &self.camera, &v.world_from_camera, v.id, self.stride)
    }

    fn truth(&self) -> Option<Pose> {
        self.truth
    }
}
