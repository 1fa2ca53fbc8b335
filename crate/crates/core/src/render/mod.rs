//! Structured-light scene simulator.
//!
//! Rendering happens in two stages. [`trace_paths`] casts one primary ray per
//! pixel and follows its mirror-reflection chain, recording at each surface
//! vertex the geometry of the direct point-light term. The recorded
//! [`PathImage`] is then shaded for any material set and light modulation,
//! which makes white renders, pattern renders and BSDF fitting share the
//! same geometry.

mod bsdf;
mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bsdf::{eval_bsdf, fresnel, reflect, BsdfParams, MIN_ROUGHNESS};
pub use scene::{PointLight, SceneDescription, SceneObject, Shape};

use crate::bvh::TriangleBvh;
use crate::calib::ResponseCurve;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Pose, Vec2, Vec3};
use crate::uncertainty::{score_depth_map, DepthMap, IntensityImage, ScoreOptions};

/// Surface offset for secondary rays (mm).
const RAY_EPSILON: f64 = 1e-3;
pub const DEFAULT_BOUNCES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    SinglePath,
    MultiPath { bounces: usize },
}

impl RenderMode {
    fn bounces(self) -> usize {
        match self {
            RenderMode::SinglePath => 1,
            RenderMode::MultiPath { bounces } => bounces.max(1),
        }
    }
}

/// Per-pixel linear radiance with first-hit depth and object.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceImage {
    pub width: usize,
    pub height: usize,
    pub radiance: Vec<f64>,
    /// Camera-frame z of the first hit, 0 where there is none.
    pub depth: Vec<f64>,
    /// Rendered: the ray hit a surface. Recovered: the pixel is reliable.
    pub valid: Vec<bool>,
    pub object: Vec<Option<usize>>,
}

impl RadianceImage {
    pub fn len(&self) -> usize {
        self.radiance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radiance.is_empty()
    }

    pub fn object_mask(&self, index: usize) -> Vec<bool> {
        self.object.iter().map(|o| *o == Some(index)).collect()
    }
}

/// Geometry of one surface interaction along a pixel's path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathVertex {
    pub object: usize,
    pub normal: Vec3,
    /// Towards the light.
    pub wi: Vec3,
    /// Towards the previous vertex (or the camera).
    pub wo: Vec3,
    /// `visibility · cosθ_i / r²` for a unit-intensity light.
    pub irradiance: f64,
    /// Horizontal projector coordinate of the vertex, NaN behind it.
    pub projector_u: f64,
    /// Width in projector pixels of the camera pixel's footprint on the
    /// first surface; 0 (point sample) elsewhere.
    pub projector_footprint: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelPath {
    pub depth: f64,
    pub vertices: Vec<PathVertex>,
}

impl PixelPath {
    pub fn object(&self) -> Option<usize> {
        self.vertices.first().map(|v| v.object)
    }

    /// Radiance through this path using at most `bounces` vertices; `light`
    /// gives the point light's output over a projector column span
    /// `(centre, width)` seen from each vertex.
    pub fn shade(
        &self,
        materials: &[BsdfParams],
        ambient: f64,
        bounces: usize,
        light: impl Fn(f64, f64) -> f64,
    ) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let mut total = ambient;
        let mut throughput = 1.0;
        for v in self.vertices.iter().take(bounces) {
            let m = &materials[v.object];
            if v.irradiance > 0.0 {
                total += throughput
                    * eval_bsdf(m, &v.normal, &v.wi, &v.wo)
                    * v.irradiance
                    * light(v.projector_u, v.projector_footprint);
            }
            throughput *= fresnel(m, v.normal.dot(&v.wo));
            if throughput <= 0.0 {
                break;
            }
        }
        total
    }
}

/// Traced paths of every pixel of one eye.
#[derive(Debug, Clone)]
pub struct PathImage {
    pub width: usize,
    pub height: usize,
    pub paths: Vec<PixelPath>,
}

impl PathImage {
    /// Shades every pixel with a uniform light of `intensity`.
    pub fn radiance(&self, materials: &[BsdfParams], ambient: f64, intensity: f64, bounces: usize) -> RadianceImage {
        self.radiance_with(materials, ambient, bounces, |_, _| intensity)
    }

    pub fn radiance_with(
        &self,
        materials: &[BsdfParams],
        ambient: f64,
        bounces: usize,
        light: impl Fn(f64, f64) -> f64 + Sync,
    ) -> RadianceImage {
        let radiance = self
            .paths
            .par_iter()
            .map(|p| p.shade(materials, ambient, bounces, &light))
            .collect();
        RadianceImage {
            width: self.width,
            height: self.height,
            radiance,
            depth: self.paths.iter().map(|p| p.depth).collect(),
            valid: self.paths.iter().map(|p| !p.vertices.is_empty()).collect(),
            object: self.paths.iter().map(PixelPath::object).collect(),
        }
    }
}

struct Tracer {
    bvh: TriangleBvh,
    owner: Vec<usize>,
    normal: Vec<Vec3>,
    light: Vec3,
    projector_from_world: Pose,
    camera: CameraModel,
}

impl Tracer {
    fn new(scene: &SceneDescription) -> Self {
        let mut soup = Vec::new();
        let mut owner = Vec::new();
        let mut normal = Vec::new();
        for (k, obj) in scene.objects.iter().enumerate() {
            let t = &obj.world_from_object;
            for i in 0..obj.mesh.triangles().len() {
                let tri = obj.mesh.triangle(i).map(|p| t.transform_point(&p));
                soup.push(tri);
                owner.push(k);
                normal.push(t.rotate(&obj.mesh.face_normal(i)));
            }
        }
        let light = scene.light_world();
        // The projector shares the left camera's orientation and intrinsics.
        let world_from_projector = Pose::from_parts_unchecked(*scene.world_from_camera.rotation(), light);
        Self {
            bvh: TriangleBvh::new(soup),
            owner,
            normal,
            light,
            projector_from_world: world_from_projector.inverse(),
            camera: scene.camera,
        }
    }

    fn projector_u(&self, p: &Vec3) -> f64 {
        let q = self.projector_from_world.transform_point(p);
        if q.z <= 0.0 {
            return f64::NAN;
        }
        self.camera.fx * q.x / q.z + self.camera.cx
    }

    fn trace(&self, origin: Vec3, dir: Vec3, max_vertices: usize) -> (f64, Vec<PathVertex>) {
        let mut vertices = Vec::with_capacity(max_vertices);
        let (mut o, mut d) = (origin, dir);
        let mut first_t = 0.0;
        while vertices.len() < max_vertices {
            let Some(hit) = self.bvh.intersect(&o, &d, 0.0, f64::INFINITY) else {
                break;
            };
            if vertices.is_empty() {
                first_t = hit.t;
            }
            let p = o + d * hit.t;
            let wo = -d;
            let mut n = self.normal[hit.triangle];
            if n.dot(&wo) < 0.0 {
                n = -n;
            }
            let p_off = p + n * RAY_EPSILON;
            let to_light = self.light - p;
            let r = to_light.norm();
            let wi = to_light / r;
            let cos = n.dot(&wi);
            let irradiance = if cos > 0.0 && !self.bvh.occluded(&p_off, &wi, 0.0, r - RAY_EPSILON) {
                cos / (r * r)
            } else {
                0.0
            };
            vertices.push(PathVertex {
                object: self.owner[hit.triangle],
                normal: n,
                wi,
                wo,
                irradiance,
                projector_u: self.projector_u(&p),
                projector_footprint: 0.0,
            });
            o = p_off;
            d = reflect(&wo, &n);
        }
        (first_t, vertices)
    }
}

/// Traces every pixel of the camera at `world_from_eye` (intrinsics and
/// light taken from `scene`).
pub fn trace_paths_from(scene: &SceneDescription, world_from_eye: &Pose, max_vertices: usize) -> PathImage {
    let tracer = Tracer::new(scene);
    let cam = scene.camera;
    let origin = *world_from_eye.translation();
    let mut paths: Vec<PixelPath> = (0..cam.pixel_count())
        .into_par_iter()
        .map(|i| {
            let u = Vec2::new((i % cam.width) as f64, (i / cam.width) as f64);
            let bearing = cam.bearing(&u);
            let (t, vertices) = tracer.trace(origin, world_from_eye.rotate(&bearing), max_vertices.max(1));
            PixelPath {
                depth: if vertices.is_empty() { 0.0 } else { t * bearing.z },
                vertices,
            }
        })
        .collect();
    // A pixel integrates the pattern over its footprint; its width in
    // projector columns comes from the neighbours on the same face.
    let footprints: Vec<f64> = (0..paths.len())
        .map(|i| {
            let x = i % cam.width;
            let Some(v) = paths[i].vertices.first() else {
                return 0.0;
            };
            let same_face = |j: usize| {
                paths[j]
                    .vertices
                    .first()
                    .filter(|w| w.object == v.object && w.normal.dot(&v.normal) > 0.999 && w.projector_u.is_finite())
                    .map(|w| w.projector_u)
            };
            let left = (x > 0).then(|| same_face(i - 1)).flatten();
            let right = (x + 1 < cam.width).then(|| same_face(i + 1)).flatten();
            let width = match (left, right) {
                (Some(a), Some(b)) => 0.5 * (b - a).abs(),
                (Some(a), None) => (v.projector_u - a).abs(),
                (None, Some(b)) => (b - v.projector_u).abs(),
                (None, None) => 0.0,
            };
            if width.is_finite() {
                width
            } else {
                0.0
            }
        })
        .collect();
    for (p, w) in paths.iter_mut().zip(footprints) {
        if let Some(v) = p.vertices.first_mut() {
            v.projector_footprint = w;
        }
    }
    PathImage {
        width: cam.width,
        height: cam.height,
        paths,
    }
}

/// Paths of the left eye.
pub fn trace_paths(scene: &SceneDescription, max_vertices: usize) -> PathImage {
    trace_paths_from(scene, &scene.world_from_camera, max_vertices)
}

pub fn right_eye_pose(scene: &SceneDescription) -> Pose {
    scene
        .world_from_camera
        .compose(&Pose::from_translation(Vec3::new(scene.camera.baseline, 0.0, 0.0)))
}

fn materials(scene: &SceneDescription) -> Vec<BsdfParams> {
    scene.objects.iter().map(|o| o.material).collect()
}

/// Renders the left eye under uniform light.
pub fn render_radiance(scene: &SceneDescription, mode: RenderMode) -> RadianceImage {
    let paths = trace_paths(scene, mode.bounces());
    paths.radiance(&materials(scene), scene.ambient, scene.light.intensity, mode.bounces())
}

/// Single-path and multi-path renders from one trace.
pub fn render_single_and_multi(scene: &SceneDescription, bounces: usize) -> (RadianceImage, RadianceImage) {
    let paths = trace_paths(scene, bounces.max(1));
    let m = materials(scene);
    (
        paths.radiance(&m, scene.ambient, scene.light.intensity, 1),
        paths.radiance(&m, scene.ambient, scene.light.intensity, bounces.max(1)),
    )
}

/// `I = g(E·Δt)`, clamped to [0, 1].
pub fn render_image(rad: &RadianceImage, response: &ResponseCurve, exposure: f64) -> Result<IntensityImage> {
    if !(exposure > 0.0) {
        return Err(Error::Contract(format!("exposure must be positive, got {exposure}")));
    }
    let values = rad.radiance.iter().map(|e| response.apply(e * exposure)).collect();
    IntensityImage::new(rad.width, rad.height, values)
}

/// Seeded binary column strips in projector space. No more than two
/// neighbouring strips share a value, so every few strips carry an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct StripePattern {
    bits: Vec<bool>,
    strip_width: f64,
}

impl StripePattern {
    pub fn new(seed: u64, strip_width: f64, columns: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (columns as f64 / strip_width).ceil() as usize + 1;
        let mut bits: Vec<bool> = Vec::with_capacity(n);
        for k in 0..n {
            let mut b = rng.random::<bool>();
            if k >= 2 && bits[k - 1] == bits[k - 2] {
                b = !bits[k - 1];
            }
            bits.push(b);
        }
        Self { bits, strip_width }
    }

    /// Whether projector column `u` is lit strongly; repeats periodically.
    pub fn is_strong(&self, u: f64) -> bool {
        if !u.is_finite() {
            return false;
        }
        let k = (u / self.strip_width).floor() as i64;
        self.bits[k.rem_euclid(self.bits.len() as i64) as usize]
    }

    /// Strongly lit share of the columns `centre ± width/2`; a point sample
    /// when `width` is 0.
    pub fn strong_fraction(&self, centre: f64, width: f64) -> f64 {
        if !centre.is_finite() {
            return 0.0;
        }
        if !(width > 1e-9) {
            return if self.is_strong(centre) { 1.0 } else { 0.0 };
        }
        // Wide footprints see the pattern's mean.
        let width = width.min(16.0 * self.strip_width);
        let (a, b) = (centre - 0.5 * width, centre + 0.5 * width);
        let mut k = (a / self.strip_width).floor();
        let mut lit = 0.0;
        while k * self.strip_width < b {
            let lo = (k * self.strip_width).max(a);
            let hi = ((k + 1.0) * self.strip_width).min(b);
            if self.is_strong((k + 0.5) * self.strip_width) {
                lit += hi - lo;
            }
            k += 1.0;
        }
        lit / width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternSettings {
    /// Light scale of strong strips, as a fraction of the scene intensity.
    pub strong: f64,
    /// Light scale of weak strips.
    pub weak: f64,
    /// Exposure time Δt.
    pub exposure: f64,
    pub seed: u64,
    /// Strip width in projector pixels.
    pub strip_width: f64,
}

impl Default for PatternSettings {
    fn default() -> Self {
        Self {
            strong: 1.0,
            weak: 0.25,
            exposure: 1.0,
            seed: 7,
            strip_width: 2.0,
        }
    }
}

/// Pattern-projected stereo pair rendered with inter-reflections.
#[derive(Debug, Clone)]
pub struct PatternPair {
    pub left: IntensityImage,
    pub right: IntensityImage,
    /// Disparity of left pixels from rendered depth.
    pub disparity: Vec<Option<f64>>,
}

fn shade_pattern(
    paths: &PathImage,
    scene: &SceneDescription,
    pattern: &StripePattern,
    settings: &PatternSettings,
    bounces: usize,
    response: &ResponseCurve,
) -> Result<IntensityImage> {
    let (strong, weak) = (
        settings.strong * scene.light.intensity,
        settings.weak * scene.light.intensity,
    );
    let rad = paths.radiance_with(&materials(scene), scene.ambient, bounces, |u, width| {
        let f = pattern.strong_fraction(u, width);
        f * strong + (1.0 - f) * weak
    });
    render_image(&rad, response, settings.exposure)
}

pub fn synthesize_pattern_pair(
    scene: &SceneDescription,
    response: &ResponseCurve,
    settings: &PatternSettings,
    bounces: usize,
) -> Result<PatternPair> {
    let left_paths = trace_paths(scene, bounces);
    let right_paths = trace_paths_from(scene, &right_eye_pose(scene), bounces);
    pattern_pair_from_paths(scene, &left_paths, &right_paths, response, settings, bounces)
}

fn pattern_pair_from_paths(
    scene: &SceneDescription,
    left_paths: &PathImage,
    right_paths: &PathImage,
    response: &ResponseCurve,
    settings: &PatternSettings,
    bounces: usize,
) -> Result<PatternPair> {
    if !(settings.strong > settings.weak && settings.weak > 0.0) {
        return Err(Error::Config("pattern needs strong > weak > 0".into()));
    }
    let pattern = StripePattern::new(settings.seed, settings.strip_width, 4 * scene.camera.width);
    Ok(PatternPair {
        left: shade_pattern(left_paths, scene, &pattern, settings, bounces, response)?,
        right: shade_pattern(right_paths, scene, &pattern, settings, bounces, response)?,
        disparity: left_paths
            .paths
            .iter()
            .map(|p| (!p.vertices.is_empty()).then(|| scene.camera.disparity(p.depth)))
            .collect(),
    })
}

/// Pixels whose single-path share of the multi-path radiance is below
/// `tau_i` (true = missing).
pub fn predict_missing_mask(single: &RadianceImage, multi: &RadianceImage, tau_i: f64) -> Result<Vec<bool>> {
    if single.len() != multi.len() {
        return Err(Error::Dimension("single and multi renders differ in size".into()));
    }
    Ok(single
        .radiance
        .iter()
        .zip(&multi.radiance)
        .map(|(&s, &m)| m < 1e-9 || s / m < tau_i)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionSettings {
    /// Minimum single/multi radiance ratio.
    pub tau_i: f64,
    /// Patch, image noise and σ_z threshold.
    pub score: ScoreOptions,
    pub pattern: PatternSettings,
    pub bounces: usize,
}

impl Default for PredictionSettings {
    fn default() -> Self {
        Self {
            tau_i: 0.7,
            score: ScoreOptions {
                tau_sigma: Some(2.0),
                ..ScoreOptions::default()
            },
            pattern: PatternSettings::default(),
            bounces: DEFAULT_BOUNCES,
        }
    }
}

/// Expected measurement of one object from one viewpoint.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Depth and σ_z² on object pixels that are expected to be measured.
    pub depth: DepthMap,
    /// Pixels whose first hit is the object.
    pub mask: Vec<bool>,
    pub object_pixels: usize,
    /// Object pixels dropped by the radiance-ratio test.
    pub interreflection_missing: usize,
}

/// Renders the scene with the object at `world_from_object` seen from
/// `world_from_camera`, and predicts which object pixels will be measured
/// and with what depth variance.
pub fn predict_depth_map(
    scene: &SceneDescription,
    object: usize,
    world_from_object: &Pose,
    world_from_camera: &Pose,
    settings: &PredictionSettings,
    response: &ResponseCurve,
) -> Result<Prediction> {
    if object >= scene.objects.len() {
        return Err(Error::Config(format!("no object {object} in scene")));
    }
    let s = scene
        .with_object_pose(object, *world_from_object)
        .with_camera_pose(*world_from_camera);
    let bounces = settings.bounces.max(1);
    let left_paths = trace_paths(&s, bounces);
    let right_paths = trace_paths_from(&s, &right_eye_pose(&s), bounces);
    let m = materials(&s);
    let single = left_paths.radiance(&m, s.ambient, s.light.intensity, 1);
    let multi = left_paths.radiance(&m, s.ambient, s.light.intensity, bounces);
    let pair = pattern_pair_from_paths(&s, &left_paths, &right_paths, response, &settings.pattern, bounces)?;

    let mask = single.object_mask(object);
    let n = mask.len();
    let mut raw = DepthMap::empty(s.camera.width, s.camera.height);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        raw.set(i, single.depth[i], 1.0);
    }
    let mut depth = score_depth_map(&pair.left, &pair.right, &raw, &s.camera, &settings.score)?;
    let missing = predict_missing_mask(&single, &multi, settings.tau_i)?;
    let mut interreflection_missing = 0;
    for i in 0..n {
        if mask[i] && missing[i] {
            interreflection_missing += 1;
            depth.invalidate(i);
        }
    }
    Ok(Prediction {
        depth,
        object_pixels: mask.iter().filter(|&&m| m).count(),
        mask,
        interreflection_missing,
    })
}

/// Fraction of the object's silhouette left unoccluded by the rest of the
/// scene.
pub fn visibility(scene: &SceneDescription, object: usize) -> f64 {
    let full = trace_paths(scene, 1);
    let alone = trace_paths(&scene.isolated(object), 1);
    let seen = full.paths.iter().filter(|p| p.object() == Some(object)).count();
    let total = alone.paths.iter().filter(|p| p.object() == Some(0)).count();
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureNoise {
    /// Add N(0, σ_z²) to every measured depth.
    pub depth_noise: bool,
    /// Fraction of measured pixels replaced by gross errors.
    pub outlier_fraction: f64,
    /// Gross errors are uniform in ±this many mm along the optical axis.
    pub outlier_range: f64,
}

impl Default for CaptureNoise {
    fn default() -> Self {
        Self {
            depth_noise: true,
            outlier_fraction: 0.0,
            outlier_range: 30.0,
        }
    }
}

impl CaptureNoise {
    pub fn clean() -> Self {
        Self {
            depth_noise: false,
            ..Self::default()
        }
    }
}

/// A simulated sensor frame of the true scene.
#[derive(Debug, Clone)]
pub struct Capture {
    pub depth: DepthMap,
    pub mask: Vec<bool>,
}

/// Measures the true scene from `world_from_camera`: the measured pixel set
/// and σ_z come from the pattern images of the true scene, and depth is the
/// rendered depth plus the configured noise.
pub fn simulate_capture(
    scene: &SceneDescription,
    object: usize,
    world_from_camera: &Pose,
    settings: &PredictionSettings,
    response: &ResponseCurve,
    noise: &CaptureNoise,
    rng: &mut impl Rng,
) -> Result<Capture> {
    let truth = scene.objects[object].world_from_object;
    let pred = predict_depth_map(scene, object, &truth, world_from_camera, settings, response)?;
    let mut depth = pred.depth;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..depth.len() {
        let Some((z, var)) = depth.get(i) else {
            continue;
        };
        let mut measured = z;
        if noise.depth_noise {
            measured += var.sqrt() * unit.sample(rng);
        }
        if noise.outlier_fraction > 0.0 && rng.random::<f64>() < noise.outlier_fraction {
            measured = z + rng.random_range(-1.0..1.0) * noise.outlier_range;
        }
        depth.set(i, measured, var);
    }
    Ok(Capture { depth, mask: pred.mask })
}

#[cfg(test)]
mod tests;
