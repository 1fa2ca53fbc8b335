//! Next-best-view planning by predicted pose entropy, and the active
//! acquisition loop.

use std::io::Write;
use std::time::Instant;

use nalgebra::Matrix6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::ResponseCurve;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::harness::pose_error;
use crate::refine::{build_measurement_set, fisher_information, refine, MeasurementSet, RefineOptions};
use crate::render::{
    predict_depth_map, simulate_capture, trace_paths, CaptureNoise, PredictionSettings, SceneDescription,
};
use crate::sdf::SdfGrid;
use crate::uncertainty::DepthMap;

/// `6·ln(2πe)`.
fn gaussian_constant() -> f64 {
    6.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointCandidate {
    pub id: usize,
    /// `world_from_camera`.
    pub pose: Pose,
    pub visited: bool,
}

impl ViewpointCandidate {
    pub fn new(id: usize, pose: Pose) -> Self {
        Self {
            id,
            pose,
            visited: false,
        }
    }
}

/// `count` Fibonacci-lattice views on the part of a sphere around `target`
/// above `min_elevation` (radians), all looking at `target`.
pub fn hemisphere_candidates(
    target: &Vec3,
    radius: f64,
    count: usize,
    min_elevation: f64,
) -> Result<Vec<ViewpointCandidate>> {
    if count == 0 || !(radius > 0.0) || !(0.0..std::f64::consts::FRAC_PI_2).contains(&min_elevation) {
        return Err(Error::Config(
            "candidate hemisphere needs count > 0, radius > 0 and elevation in [0, 90°)".into(),
        ));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let z_min = min_elevation.sin();
    (0..count)
        .map(|k| {
            let z = z_min + (1.0 - z_min) * (k as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * k as f64;
            let eye = target + Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius;
            let up = if r < 1e-3 { Vec3::y() } else { Vec3::z() };
            Ok(ViewpointCandidate::new(k, Pose::look_at(eye, *target, up)?))
        })
        .collect()
}

/// Differential entropy `½·ln((2πe)⁶·det Σ)` in nats; `+∞` when Σ is not
/// positive definite.
pub fn entropy(cov: &Matrix6<f64>) -> Result<f64> {
    let scale = cov.amax();
    let asym = (cov - cov.transpose()).amax();
    if !cov.iter().all(|v| v.is_finite()) || asym > 1e-6 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Contract(format!(
            "covariance is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    Ok(match sym.cholesky() {
        Some(c) => 0.5 * (gaussian_constant() + 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()),
        None => f64::INFINITY,
    })
}

/// Entropy of the Gaussian whose information matrix is `info`, without
/// forming the inverse; `+∞` when `info` is singular.
pub fn entropy_from_information(info: &Matrix6<f64>) -> f64 {
    let sym = (info + info.transpose()) * 0.5;
    match sym.cholesky() {
        Some(c) => {
            let logdet: f64 = 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if logdet.is_finite() {
                0.5 * (gaussian_constant() - logdet)
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseBelief {
    /// `object_from_world` estimate.
    pub pose: Pose,
    pub covariance: Matrix6<f64>,
    pub entropy_nats: f64,
}

impl PoseBelief {
    pub fn new(pose: Pose, covariance: Matrix6<f64>) -> Result<Self> {
        let entropy_nats = entropy(&covariance)?;
        Ok(Self {
            pose,
            covariance,
            entropy_nats,
        })
    }

    /// Belief from a full-rank information matrix.
    pub fn from_information(pose: Pose, info: &Matrix6<f64>) -> Result<Self> {
        let sym = (info + info.transpose()) * 0.5;
        let chol = sym
            .cholesky()
            .ok_or_else(|| Error::Numerical("information matrix is not positive definite".into()))?;
        let cov = chol.inverse();
        let cov = (cov + cov.transpose()) * 0.5;
        Ok(Self {
            pose,
            covariance: cov,
            entropy_nats: entropy_from_information(&sym),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Nbv,
    Random,
    MaxDistance,
    /// NBV with a constant depth variance and no missing-pixel prediction.
    NbvConstUnc,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Nbv, Policy::Random, Policy::MaxDistance, Policy::NbvConstUnc];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Nbv => "nbv",
            Policy::Random => "random",
            Policy::MaxDistance => "max-distance",
            Policy::NbvConstUnc => "nbv-const-unc",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbvOptions {
    /// Prior standard deviation of the initial estimate's translation (mm).
    pub prior_sigma_t: f64,
    /// Prior standard deviation of its rotation (radians).
    pub prior_sigma_r: f64,
    /// Depth variance (mm²) assumed by the constant-uncertainty ablation.
    pub const_variance: f64,
    /// Pixel stride for predicted and acquired measurement sets.
    pub stride: usize,
}

impl Default for NbvOptions {
    fn default() -> Self {
        Self {
            prior_sigma_t: 15.0,
            prior_sigma_r: 15f64.to_radians(),
            const_variance: 0.25,
            stride: 2,
        }
    }
}

impl NbvOptions {
    /// Information of the initial estimate, `diag(1/σ_t², 1/σ_r²)`.
    pub fn prior_information(&self) -> Matrix6<f64> {
        let (t, r) = (self.prior_sigma_t.powi(-2), self.prior_sigma_r.powi(-2));
        Matrix6::from_diagonal(&nalgebra::Vector6::new(t, t, t, r, r, r))
    }
}

/// What the planner knows: the scene with the target at its estimated pose,
/// the target's SDF and the sensor model.
pub struct Planner<'a> {
    pub scene: &'a SceneDescription,
    pub object: usize,
    pub grid: &'a SdfGrid,
    pub settings: PredictionSettings,
    pub response: &'a ResponseCurve,
    pub options: NbvOptions,
}

impl Planner<'_> {
    /// Expected measurement set from `cand` with the object at the current
    /// estimate; `None` when nothing would be measured.
    pub fn predict_candidate(
        &self,
        cand: &ViewpointCandidate,
        belief: &PoseBelief,
        const_unc: bool,
    ) -> Result<Option<MeasurementSet>> {
        let world_from_object = belief.pose.inverse();
        let depth = if const_unc {
            let s = self
                .scene
                .with_object_pose(self.object, world_from_object)
                .with_camera_pose(cand.pose);
            let paths = trace_paths(&s, 1);
            let mut depth = DepthMap::empty(s.camera.width, s.camera.height);
            for (i, p) in paths.paths.iter().enumerate() {
                if p.object() == Some(self.object) {
                    depth.set(i, p.depth, self.options.const_variance);
                }
            }
            depth
        } else {
            predict_depth_map(
                self.scene,
                self.object,
                &world_from_object,
                &cand.pose,
                &self.settings,
                self.response,
            )?
            .depth
        };
        let mask = vec![true; depth.len()];
        match build_measurement_set(
            &depth,
            &mask,
            &self.scene.camera,
            &cand.pose,
            cand.id,
            self.options.stride,
        ) {
            Ok(set) => Ok(Some(set)),
            Err(Error::EmptyMeasurement(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Scores every unvisited candidate by the entropy of the stacked
    /// information `prior + acquired + predicted`, evaluated at the current
    /// estimate.
    pub fn select_nbv(
        &self,
        candidates: &[ViewpointCandidate],
        acquired: &[MeasurementSet],
        belief: &PoseBelief,
        const_unc: bool,
    ) -> Result<Selection> {
        let base = self.options.prior_information() + fisher_information(acquired, &belief.pose, self.grid);
        let open: Vec<&ViewpointCandidate> = candidates.iter().filter(|c| !c.visited).collect();
        if open.is_empty() {
            return Err(Error::Config("no unvisited candidate left".into()));
        }
        let scores = open
            .par_iter()
            .map(|c| {
                let pred = self.predict_candidate(c, belief, const_unc)?;
                let (info, points) = match &pred {
                    Some(set) => (
                        base + fisher_information(std::slice::from_ref(set), &belief.pose, self.grid),
                        set.len(),
                    ),
                    None => (base, 0),
                };
                Ok(CandidateScore {
                    id: c.id,
                    entropy: entropy_from_information(&info),
                    points,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let best = scores
            .iter()
            .min_by(|a, b| a.entropy.total_cmp(&b.entropy).then(a.id.cmp(&b.id)))
            .expect("non-empty");
        let no_information = scores.iter().all(|s| s.points == 0);
        let best_id = if no_information {
            open.iter().map(|c| c.id).min().expect("non-empty")
        } else {
            best.id
        };
        Ok(Selection {
            best_id,
            predicted_entropy: scores
                .iter()
                .find(|s| s.id == best_id)
                .map_or(f64::INFINITY, |s| s.entropy),
            scores,
            no_information,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub id: usize,
    pub entropy: f64,
    /// Predicted measurement count.
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best_id: usize,
    pub predicted_entropy: f64,
    pub scores: Vec<CandidateScore>,
    /// Every candidate predicted an empty measurement.
    pub no_information: bool,
}

/// Where measurements come from.
pub trait MeasurementSource {
    fn acquire(&mut self, view: &ViewpointCandidate) -> Result<MeasurementSet>;

    /// `world_from_object` ground truth, if known.
    fn truth(&self) -> Option<Pose>;
}

/// Measures the true scene with the simulated sensor.
pub struct SimulatedSource<'a> {
    pub scene: &'a SceneDescription,
    pub object: usize,
    pub settings: PredictionSettings,
    pub response: &'a ResponseCurve,
    pub noise: CaptureNoise,
    pub stride: usize,
    pub rng: ChaCha8Rng,
}

impl MeasurementSource for SimulatedSource<'_> {
    fn acquire(&mut self, view: &ViewpointCandidate) -> Result<MeasurementSet> {
        let cap = simulate_capture(
            self.scene,
            self.object,
            &view.pose,
            &self.settings,
            self.response,
            &self.noise,
            &mut self.rng,
        )?;
        build_measurement_set(
            &cap.depth,
            &cap.mask,
            &self.scene.camera,
            &view.pose,
            view.id,
            self.stride,
        )
    }

    fn truth(&self) -> Option<Pose> {
        Some(self.scene.objects[self.object].world_from_object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopCriteria {
    pub entropy_threshold: f64,
    pub max_views: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self {
            entropy_threshold: -10.0,
            max_views: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub view_id: usize,
    /// Measurements acquired from this view (0 when the capture was empty).
    pub points: usize,
    pub refine_converged: bool,
    pub refine_iterations: usize,
    pub belief: PoseBelief,
    /// Entropy of the views before this one, at the same pose as `belief`;
    /// never below `belief.entropy_nats` up to round-off.
    pub entropy_without_view: f64,
    /// Planner's prediction for this view, for the NBV policies.
    pub predicted_entropy: Option<f64>,
    pub no_information: bool,
    pub trans_err: Option<f64>,
    pub rot_err: Option<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub policy: Policy,
    pub initial_pose: Pose,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// One JSON object per step.
    pub fn write_jsonl(&self, out: &mut impl Write, with_wall_time: bool) -> std::io::Result<()> {
        for s in &self.steps {
            let mut v = serde_json::to_value(s).expect("step serializes");
            v["policy"] = self.policy.name().into();
            v["pose"] = serde_json::json!(s.belief.pose.to_row_major());
            v["covariance"] = serde_json::json!(s.belief.covariance.transpose().as_slice());
            if let Some(obj) = v.as_object_mut() {
                obj.remove("belief");
            }
            v["entropy"] = serde_json::json!(s.belief.entropy_nats);
            if with_wall_time {
                v["wall_time_s"] = s.wall_time_s.into();
            }
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    /// First view count after which the estimate is within the thresholds.
    pub fn views_to_success(&self, trans_mm: f64, rot_deg: f64) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| matches!((s.trans_err, s.rot_err), (Some(t), Some(r)) if t <= trans_mm && r <= rot_deg))
            .map(|k| k + 1)
    }

    /// Whether the estimate after `views` views is within the thresholds;
    /// the last estimate carries over when the loop stopped earlier.
    pub fn success_at(&self, views: usize, trans_mm: f64, rot_deg: f64) -> bool {
        if views == 0 || self.steps.is_empty() {
            return false;
        }
        let s = &self.steps[views.min(self.steps.len()) - 1];
        matches!((s.trans_err, s.rot_err), (Some(t), Some(r)) if t <= trans_mm && r <= rot_deg)
    }
}

fn camera_centre(c: &ViewpointCandidate) -> Vec3 {
    *c.pose.translation()
}

/// Selects views with `policy`, acquires them, refines the pose with every
/// set so far and updates the belief, until the entropy drops below the
/// threshold, `max_views` views were taken or no candidate is left. When
/// `first_view` names a candidate id, every policy starts there.
#[allow(clippy::too_many_arguments)]
pub fn active_loop(
    planner: &Planner,
    candidates: &[ViewpointCandidate],
    source: &mut dyn MeasurementSource,
    initial_object_from_world: &Pose,
    stop: &StopCriteria,
    policy: Policy,
    refine_opts: &RefineOptions,
    first_view: Option<usize>,
    seed: u64,
) -> Result<Trajectory> {
    if candidates.is_empty() {
        return Err(Error::Config("active loop needs at least one candidate".into()));
    }
    let first = match first_view {
        Some(id) => Some(
            candidates
                .iter()
                .position(|c| c.id == id)
                .ok_or_else(|| Error::Config(format!("first view {id} is not a candidate")))?,
        ),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands = candidates.to_vec();
    let prior = planner.options.prior_information();
    let mut pose = *initial_object_from_world;
    let mut belief = PoseBelief::from_information(pose, &prior)?;
    let mut sets: Vec<MeasurementSet> = Vec::new();
    let mut steps = Vec::new();
    let truth = source.truth();

    for step in 0..stop.max_views {
        let open: Vec<usize> = (0..cands.len()).filter(|&i| !cands[i].visited).collect();
        if open.is_empty() {
            break;
        }
        let started = Instant::now();
        let (pick, predicted, no_information) = match policy {
            _ if step == 0 && first.is_some() => (first.expect("checked"), None, false),
            Policy::Nbv | Policy::NbvConstUnc => {
                let sel = planner.select_nbv(&cands, &sets, &belief, policy == Policy::NbvConstUnc)?;
                let idx = cands
                    .iter()
                    .position(|c| c.id == sel.best_id)
                    .expect("selected id exists");
                (idx, Some(sel.predicted_entropy), sel.no_information)
            }
            Policy::Random => (open[rng.random_range(0..open.len())], None, false),
            Policy::MaxDistance => {
                let visited: Vec<Vec3> = cands.iter().filter(|c| c.visited).map(camera_centre).collect();
                let idx = if visited.is_empty() {
                    open[rng.random_range(0..open.len())]
                } else {
                    let spread = |i: usize| {
                        let c = camera_centre(&cands[i]);
                        visited.iter().map(|v| (c - v).norm()).fold(f64::INFINITY, f64::min)
                    };
                    *open
                        .iter()
                        .max_by(|&&a, &&b| spread(a).total_cmp(&spread(b)).then(cands[b].id.cmp(&cands[a].id)))
                        .expect("non-empty")
                };
                (idx, None, false)
            }
        };
        cands[pick].visited = true;
        let view = cands[pick].clone();

        let mut error = None;
        let mut points = 0;
        match source.acquire(&view) {
            Ok(set) => {
                points = set.len();
                sets.push(set);
            }
            Err(e) => error = Some(e.to_string()),
        }
        let (mut refine_converged, mut refine_iterations) = (false, 0);
        if !sets.is_empty() {
            let result = refine(&sets, &pose, planner.grid, refine_opts);
            refine_converged = result.converged;
            refine_iterations = result.iterations;
            if result.converged {
                pose = result.pose;
            } else if error.is_none() {
                error = Some("refinement did not converge".into());
            }
        }
        let before = prior
            + fisher_information(
                &sets[..sets.len().saturating_sub(usize::from(points > 0))],
                &pose,
                planner.grid,
            );
        let info = prior + fisher_information(&sets, &pose, planner.grid);
        belief = PoseBelief::from_information(pose, &info)?;
        let (trans_err, rot_err) = match &truth {
            Some(t) => {
                let (te, re) = pose_error(&pose.inverse(), t);
                (Some(te), Some(re))
            }
            None => (None, None),
        };
        steps.push(TrajectoryStep {
            step,
            view_id: view.id,
            points,
            refine_converged,
            refine_iterations,
            entropy_without_view: entropy_from_information(&before),
            belief: belief.clone(),
            predicted_entropy: predicted,
            no_information,
            trans_err,
            rot_err,
            wall_time_s: started.elapsed().as_secs_f64(),
            error,
        });
        if belief.entropy_nats < stop.entropy_threshold {
            break;
        }
    }
    Ok(Trajectory {
        policy,
        initial_pose: *initial_object_from_world,
        steps,
    })
}

#[cfg(test)]
mod tests;
