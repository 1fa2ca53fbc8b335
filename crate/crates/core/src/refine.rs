//! Multi-view pose refinement against an object SDF.
//!
//! Measured points are mapped into the object frame by the current estimate
//! of `object_from_world`; their SDF values are the residuals. Each residual
//! is weighted by the SDF variance induced by its depth variance, and the
//! pose is updated on the left, `T ← exp(δ)·T`.

use nalgebra::{DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvh::TriangleBvh;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Pose, Twist, Vec2, Vec3, Vec6};
use crate::sdf::{SdfGrid, TriangleMesh};
use crate::uncertainty::DepthMap;

/// Lower bound on per-point SDF variance (mm²).
pub const SDF_VARIANCE_FLOOR: f64 = 1e-6;

/// Back-projected, world-frame points of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    points_world: Vec<Vec3>,
    depth_variance: Vec<f64>,
    ray_dirs_world: Vec<Vec3>,
    optical_axis_world: Vec3,
    view_id: usize,
}

impl MeasurementSet {
    /// `optical_axis_world` is the camera z axis; depth is measured along it.
    pub fn new(
        points_world: Vec<Vec3>,
        depth_variance: Vec<f64>,
        ray_dirs_world: Vec<Vec3>,
        optical_axis_world: Vec3,
        view_id: usize,
    ) -> Result<Self> {
        let n = points_world.len();
        if depth_variance.len() != n || ray_dirs_world.len() != n {
            return Err(Error::Dimension("measurement channels differ in length".into()));
        }
        if n == 0 {
            return Err(Error::EmptyMeasurement(view_id));
        }
        if let Some(v) = depth_variance.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidMeasurement(format!("depth variance {v}")));
        }
        if ray_dirs_world.iter().any(|r| (r.norm() - 1.0).abs() > 1e-9)
            || (optical_axis_world.norm() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidMeasurement("ray directions must be unit vectors".into()));
        }
        if points_world.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidMeasurement("non-finite point".into()));
        }
        Ok(Self {
            points_world,
            depth_variance,
            ray_dirs_world,
            optical_axis_world,
            view_id,
        })
    }

    pub fn len(&self) -> usize {
        self.points_world.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_world.is_empty()
    }

    pub fn points_world(&self) -> &[Vec3] {
        &self.points_world
    }

    pub fn depth_variance(&self) -> &[f64] {
        &self.depth_variance
    }

    pub fn ray_dirs_world(&self) -> &[Vec3] {
        &self.ray_dirs_world
    }

    pub fn optical_axis_world(&self) -> &Vec3 {
        &self.optical_axis_world
    }

    pub fn view_id(&self) -> usize {
        self.view_id
    }

    /// The same set with every depth variance replaced by `variance`.
    pub fn with_constant_variance(&self, variance: f64) -> Self {
        Self {
            depth_variance: vec![variance; self.len()],
            ..self.clone()
        }
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.points_world[i]).collect(),
            indices.iter().map(|&i| self.depth_variance[i]).collect(),
            indices.iter().map(|&i| self.ray_dirs_world[i]).collect(),
            self.optical_axis_world,
            self.view_id,
        )
    }
}

/// Back-projects valid masked pixels (every `stride`-th row and column) into
/// the world frame.
pub fn build_measurement_set(
    depth: &DepthMap,
    mask: &[bool],
    cam: &CameraModel,
    world_from_camera: &Pose,
    view_id: usize,
    stride: usize,
) -> Result<MeasurementSet> {
    if mask.len() != depth.len() || depth.width() != cam.width || depth.height() != cam.height {
        return Err(Error::Dimension("depth map, mask and camera differ in size".into()));
    }
    let stride = stride.max(1);
    let mut points = Vec::new();
    let mut variances = Vec::new();
    let mut rays = Vec::new();
    for y in (0..depth.height()).step_by(stride) {
        for x in (0..depth.width()).step_by(stride) {
            let i = y * depth.width() + x;
            let Some((z, var)) = depth.get(i).filter(|_| mask[i]) else {
                continue;
            };
            let u = Vec2::new(x as f64, y as f64);
            let p = cam.backproject(&u, z)?;
            points.push(world_from_camera.transform_point(&p));
            variances.push(var);
            rays.push(world_from_camera.rotate(&cam.bearing(&u)));
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyMeasurement(view_id));
    }
    MeasurementSet::new(points, variances, rays, world_from_camera.rotate(&Vec3::z()), view_id)
}

/// Residual, Jacobian row and SDF variance of one point.
#[derive(Debug, Clone, Copy)]
struct PointTerm {
    residual: f64,
    row: Vec6,
    variance: f64,
}

fn point_term(set: &MeasurementSet, i: usize, object_from_world: &Pose, grid: &SdfGrid) -> PointTerm {
    let p_o = object_from_world.transform_point(&set.points_world[i]);
    let (residual, grad) = grid.sample_with_gradient(&p_o);
    let mut row = Vec6::zeros();
    row.fixed_rows_mut::<3>(0).copy_from(&grad);
    row.fixed_rows_mut::<3>(3).copy_from(&p_o.cross(&grad));
    // A depth change dz moves the point by dz·ray/(ray·axis).
    let ray_o = object_from_world.rotate(&set.ray_dirs_world[i]);
    let cos = set.ray_dirs_world[i].dot(&set.optical_axis_world).max(1e-6);
    let g = grad.dot(&ray_o) / cos;
    let variance = (g * g * set.depth_variance[i]).max(SDF_VARIANCE_FLOOR);
    PointTerm {
        residual,
        row,
        variance,
    }
}

fn point_terms(sets: &[MeasurementSet], object_from_world: &Pose, grid: &SdfGrid) -> Vec<PointTerm> {
    let index: Vec<(usize, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(s, set)| (0..set.len()).map(move |i| (s, i)))
        .collect();
    index
        .par_iter()
        .map(|&(s, i)| point_term(&sets[s], i, object_from_world, grid))
        .collect()
}

/// `r_i = SDF(T_ow · p_w,i)` over all sets, in order.
pub fn sdf_residuals(sets: &[MeasurementSet], object_from_world: &Pose, grid: &SdfGrid) -> Vec<f64> {
    point_terms(sets, object_from_world, grid)
        .iter()
        .map(|t| t.residual)
        .collect()
}

/// Stacked N×6 Jacobian of the residuals with respect to a left twist
/// `[v; ω]` applied to `object_from_world`.
pub fn sdf_jacobian(sets: &[MeasurementSet], object_from_world: &Pose, grid: &SdfGrid) -> DMatrix<f64> {
    let terms = point_terms(sets, object_from_world, grid);
    DMatrix::from_fn(terms.len(), 6, |r, c| terms[r].row[c])
}

/// Per-point SDF variance `G²σ_z²`, floored at [`SDF_VARIANCE_FLOOR`].
pub fn sdf_variance(sets: &[MeasurementSet], object_from_world: &Pose, grid: &SdfGrid) -> Vec<f64> {
    point_terms(sets, object_from_world, grid)
        .iter()
        .map(|t| t.variance)
        .collect()
}

/// Weighted normal equations at one pose.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// `JᵀΣ⁻¹J`
    pub information: Matrix6<f64>,
    /// `JᵀΣ⁻¹r`
    pub gradient: Vector6<f64>,
    /// `Σ r²/Σ_sdf`
    pub cost: f64,
    pub num_points: usize,
}

pub fn linearize(sets: &[MeasurementSet], object_from_world: &Pose, grid: &SdfGrid) -> Linearization {
    linearize_terms(&point_terms(sets, object_from_world, grid))
}

fn linearize_terms(terms: &[PointTerm]) -> Linearization {
    let mut information = Matrix6::zeros();
    let mut gradient = Vector6::zeros();
    let mut cost = 0.0;
    for t in terms {
        let w = 1.0 / t.variance;
        information += t.row * t.row.transpose() * w;
        gradient += t.row * (t.residual * w);
        cost += t.residual * t.residual * w;
    }
    Linearization {
        information,
        gradient,
        cost,
        num_points: terms.len(),
    }
}

/// Fisher information `Σ_k J_kᵀ Σ_sdf,k⁻¹ J_k` of the sets at a pose.
pub fn fisher_information(sets: &[MeasurementSet], object_from_world: &Pose, grid: &SdfGrid) -> Matrix6<f64> {
    linearize(sets, object_from_world, grid).information
}

/// Inverse of an information matrix, or its pseudo-inverse when some
/// directions carry (relatively) no information.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    pub matrix: Matrix6<f64>,
    pub rank: usize,
}

impl Covariance {
    pub fn rank_deficient(&self) -> bool {
        self.rank < 6
    }
}

/// Eigenvalues below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-6;

/// Root-mean-square distance of the measured points from the object origin.
pub fn characteristic_length(sets: &[MeasurementSet], object_from_world: &Pose) -> f64 {
    let (sum, n) = sets
        .iter()
        .flat_map(|s| s.points_world.iter())
        .fold((0.0, 0usize), |(acc, n), p| {
            (acc + object_from_world.transform_point(p).norm_squared(), n + 1)
        });
    if n == 0 {
        1.0
    } else {
        (sum / n as f64).sqrt().max(1e-6)
    }
}

/// Inverts `information`. Rotations are expressed as arc length at
/// `length_scale` before ranking eigenvalues, so the rank test does not
/// depend on mixing millimetres with radians.
pub fn covariance_from_information(information: &Matrix6<f64>, length_scale: f64) -> Covariance {
    let s = Matrix6::from_diagonal(&Vector6::new(
        1.0,
        1.0,
        1.0,
        1.0 / length_scale,
        1.0 / length_scale,
        1.0 / length_scale,
    ));
    let scaled = s * information * s;
    let eig = SymmetricEigen::new((scaled + scaled.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut inv = Matrix6::zeros();
    let mut rank = 0;
    if max > 0.0 && max.is_finite() {
        for k in 0..6 {
            let l = eig.eigenvalues[k];
            if l > RANK_TOLERANCE * max {
                let v = eig.eigenvectors.column(k);
                inv += v * v.transpose() / l;
                rank += 1;
            }
        }
    }
    let matrix = s * inv * s;
    Covariance {
        matrix: (matrix + matrix.transpose()) * 0.5,
        rank,
    }
}

/// Covariance of the pose given the sets' information at `object_from_world`.
pub fn pose_covariance(sets: &[MeasurementSet], object_from_world: &Pose, grid: &SdfGrid) -> Covariance {
    covariance_from_information(
        &fisher_information(sets, object_from_world, grid),
        characteristic_length(sets, object_from_world),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub max_iters: usize,
    /// Stop once the update norm falls below this.
    pub step_tolerance: f64,
    pub lambda_init: f64,
    /// Give up once damping grows past this.
    pub lambda_max: f64,
    /// Pixel subsampling stride used when building measurement sets.
    pub stride: usize,
    /// Fraction of worst correspondences dropped by the ICP baseline.
    pub icp_trim: f64,
    /// Maximum number of variance refreshes.
    pub reweight_passes: usize,
    /// A pass that moves the pose by less than this twist norm ends the
    /// refreshes.
    pub reweight_tolerance: f64,
    pub uniform_first_pass: bool,
    /// Cauchy kernel width, in robust standard deviations of the normalized
    /// residuals; 0 turns the kernel off.
    pub cauchy_width: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            step_tolerance: 1e-6,
            lambda_init: 1e-6,
            lambda_max: 1e3,
            stride: 2,
            icp_trim: 0.1,
            reweight_passes: 10,
            reweight_tolerance: 1e-4,
            uniform_first_pass: true,
            cauchy_width: 2.385,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    /// Refined `object_from_world`.
    pub pose: Pose,
    pub covariance: Matrix6<f64>,
    pub rank: usize,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    pub num_points: usize,
    /// Cost after each accepted step of the last fixed-weight pass,
    /// starting with that pass's initial cost.
    pub cost_history: Vec<f64>,
}

impl RefinementResult {
    pub fn rank_deficient(&self) -> bool {
        self.rank < 6
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "pose": self.pose.to_row_major(),
            "covariance": self.covariance.transpose().as_slice(),
            "rank": self.rank,
            "rank_deficient": self.rank_deficient(),
            "iterations": self.iterations,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "num_points": self.num_points,
        })
    }
}

/// Uncertainty-weighted Gauss-Newton with Levenberg damping.
///
/// The damping term is `λ·(tr H / 6)·I`, so λ is relative to the scale of
/// the information matrix. The per-point variances depend on the pose; they
/// are held fixed during each damped least-squares pass and recomputed at
/// the pose it ends on, until a pass no longer moves the pose. With
/// `uniform_first_pass` an unweighted pass runs first, which widens the
/// basin of convergence when the initial pose is far off. Gross outliers
/// are damped by a Cauchy factor on each weight.
pub fn refine(sets: &[MeasurementSet], init: &Pose, grid: &SdfGrid, opts: &RefineOptions) -> RefinementResult {
    let mut pose = *init;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    if opts.uniform_first_pass {
        let terms = point_terms(sets, &pose, grid);
        let weights = robust_weights(&terms, |_| 1.0, 0.0, opts.cauchy_width);
        let pass = weighted_pass(sets, &pose, grid, &weights, opts, &mut history);
        iterations += pass.iterations;
        pose = pass.pose;
    }
    for _ in 0..opts.reweight_passes.max(1) {
        let terms = point_terms(sets, &pose, grid);
        let weights = robust_weights(&terms, |t| 1.0 / t.variance, 1.0, opts.cauchy_width);
        let start = pose;
        history.clear();
        let pass = weighted_pass(sets, &pose, grid, &weights, opts, &mut history);
        iterations += pass.iterations;
        pose = pass.pose;
        converged = pass.converged;
        let moved = pose.compose(&start.inverse()).log().to_vector().norm();
        if !converged || moved < opts.reweight_tolerance {
            break;
        }
    }
    let lin = linearize(sets, &pose, grid);
    let cov = covariance_from_information(&lin.information, characteristic_length(sets, &pose));
    RefinementResult {
        pose,
        covariance: cov.matrix,
        rank: cov.rank,
        iterations,
        final_cost: lin.cost,
        converged,
        num_points: lin.num_points,
        cost_history: history,
    }
}

/// `base(t)·ρ(e/(c·s))` with `e = r·√base`, `ρ(x) = 1/(1 + x²)` and `s` the
/// MAD scale of `e`, never below `min_scale`.
fn robust_weights(terms: &[PointTerm], base: impl Fn(&PointTerm) -> f64, min_scale: f64, width: f64) -> Vec<f64> {
    let base: Vec<f64> = terms.iter().map(base).collect();
    if !(width > 0.0) || terms.is_empty() {
        return base;
    }
    let e: Vec<f64> = terms.iter().zip(&base).map(|(t, b)| t.residual * b.sqrt()).collect();
    let mut abs: Vec<f64> = e.iter().map(|v| v.abs()).collect();
    let mid = abs.len() / 2;
    let median = *abs.select_nth_unstable_by(mid, f64::total_cmp).1;
    let scale = (1.4826 * median).max(min_scale).max(1e-12) * width;
    e.iter()
        .zip(&base)
        .map(|(v, b)| b / (1.0 + (v / scale).powi(2)))
        .collect()
}

struct Pass {
    pose: Pose,
    iterations: usize,
    converged: bool,
}

fn fixed_weight_linearization(terms: &[PointTerm], weights: &[f64]) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let mut information = Matrix6::zeros();
    let mut gradient = Vector6::zeros();
    let mut cost = 0.0;
    for (t, &w) in terms.iter().zip(weights) {
        information += t.row * t.row.transpose() * w;
        gradient += t.row * (t.residual * w);
        cost += t.residual * t.residual * w;
    }
    (information, gradient, cost)
}

/// Levenberg-damped Gauss-Newton on `Σ w_i r_i²` with fixed weights.
fn weighted_pass(
    sets: &[MeasurementSet],
    init: &Pose,
    grid: &SdfGrid,
    weights: &[f64],
    opts: &RefineOptions,
    history: &mut Vec<f64>,
) -> Pass {
    let mut pose = *init;
    let (mut information, mut gradient, mut cost) =
        fixed_weight_linearization(&point_terms(sets, &pose, grid), weights);
    history.push(cost);
    let mut lambda = opts.lambda_init;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let scale = (information.trace() / 6.0).max(1e-300);
        let damped = information + Matrix6::identity() * (lambda * scale);
        let step = damped.cholesky().map(|c| -c.solve(&gradient));
        let Some(delta) = step.filter(|d| d.iter().all(|x| x.is_finite())) else {
            lambda *= 10.0;
            if lambda > opts.lambda_max {
                break;
            }
            continue;
        };
        if delta.norm() < opts.step_tolerance {
            return Pass {
                pose,
                iterations,
                converged: true,
            };
        }
        let candidate = Twist::from_vector(&delta).exp().compose(&pose);
        let (next_info, next_grad, next_cost) =
            fixed_weight_linearization(&point_terms(sets, &candidate, grid), weights);
        if next_cost < cost {
            pose = candidate;
            (information, gradient, cost) = (next_info, next_grad, next_cost);
            history.push(cost);
            lambda = (lambda / 10.0).max(1e-12);
        } else {
            // Nothing left to gain at this pose: the model predicts a
            // decrease below round-off.
            let predicted = -(gradient.dot(&delta) + 0.5 * delta.dot(&(information * delta)));
            if predicted <= 1e-12 * cost.max(1e-300) {
                return Pass {
                    pose,
                    iterations,
                    converged: true,
                };
            }
            lambda *= 10.0;
            if lambda > opts.lambda_max {
                break;
            }
        }
    }
    Pass {
        pose,
        iterations,
        converged: false,
    }
}

/// Least-squares rigid transform taking `src` onto `dst` (Umeyama, no
/// scale).
pub fn rigid_align(src: &[Vec3], dst: &[Vec3]) -> Option<Pose> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    Some(Pose::from_parts_unchecked(r, mu_d - r * mu_s))
}

/// Point-to-mesh ICP used as a comparison baseline. Each iteration pairs
/// every point with its closest mesh point, drops the worst `icp_trim`
/// fraction and applies the best rigid alignment. The covariance is the
/// point-to-plane Fisher information at the final pose, weighted by the
/// raw depth variances.
pub fn icp_refine_baseline(
    sets: &[MeasurementSet],
    init: &Pose,
    mesh: &TriangleMesh,
    opts: &RefineOptions,
) -> RefinementResult {
    let bvh = TriangleBvh::new(mesh.triangle_soup());
    let points: Vec<(Vec3, f64)> = sets
        .iter()
        .flat_map(|s| s.points_world.iter().copied().zip(s.depth_variance.iter().copied()))
        .collect();
    let correspond = |pose: &Pose| -> Vec<(Vec3, Vec3, usize, f64)> {
        points
            .par_iter()
            .filter_map(|(p, var)| {
                let p_o = pose.transform_point(p);
                bvh.closest_point(&p_o, f64::INFINITY)
                    .map(|c| (p_o, c.point, c.triangle, *var))
            })
            .collect()
    };
    let trimmed = |mut pairs: Vec<(Vec3, Vec3, usize, f64)>| {
        pairs.sort_by(|a, b| (a.0 - a.1).norm_squared().total_cmp(&(b.0 - b.1).norm_squared()));
        let keep = ((pairs.len() as f64) * (1.0 - opts.icp_trim.clamp(0.0, 0.99))).ceil() as usize;
        pairs.truncate(keep.max(1).min(pairs.len()));
        pairs
    };
    let mean_sq = |pairs: &[(Vec3, Vec3, usize, f64)]| {
        pairs.iter().map(|(p, q, _, _)| (p - q).norm_squared()).sum::<f64>() / pairs.len().max(1) as f64
    };

    let mut pose = *init;
    let mut pairs = trimmed(correspond(&pose));
    let mut history = vec![mean_sq(&pairs)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let src: Vec<Vec3> = pairs.iter().map(|p| p.0).collect();
        let dst: Vec<Vec3> = pairs.iter().map(|p| p.1).collect();
        let Some(delta) = rigid_align(&src, &dst) else {
            break;
        };
        pose = delta.compose(&pose);
        pairs = trimmed(correspond(&pose));
        history.push(mean_sq(&pairs));
        if delta.log().to_vector().norm() < opts.step_tolerance {
            converged = true;
            break;
        }
    }
    let mut information = Matrix6::zeros();
    for (p_o, _, tri, var) in &pairs {
        let n = mesh.face_normal(*tri);
        let mut row = Vec6::zeros();
        row.fixed_rows_mut::<3>(0).copy_from(&n);
        row.fixed_rows_mut::<3>(3).copy_from(&p_o.cross(&n));
        information += row * row.transpose() / var.max(SDF_VARIANCE_FLOOR);
    }
    let cov = covariance_from_information(&information, characteristic_length(sets, &pose));
    RefinementResult {
        pose,
        covariance: cov.matrix,
        rank: cov.rank,
        iterations,
        final_cost: *history.last().unwrap(),
        converged,
        num_points: pairs.len(),
        cost_history: history,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::sdf::build_sdf;

    fn cube_grid() -> &'static SdfGrid {
        static G: OnceLock<SdfGrid> = OnceLock::new();
        G.get_or_init(|| build_sdf(&TriangleMesh::cuboid(Vec3::repeat(40.0)), 1.0, 8).unwrap())
    }

    fn bracket() -> &'static (TriangleMesh, SdfGrid) {
        static G: OnceLock<(TriangleMesh, SdfGrid)> = OnceLock::new();
        G.get_or_init(|| {
            let m = TriangleMesh::l_bracket();
            let g = build_sdf(&m, 0.5, 10).unwrap();
            (m, g)
        })
    }

    fn analytic_sphere(radius: f64) -> SdfGrid {
        SdfGrid::from_fn(Vec3::repeat(-30.0), 1.0, [61, 61, 61], |p| p.norm() - radius)
    }

    /// Surface samples seen from `eye` (world = object frame here).
    fn surface_set(mesh: &TriangleMesh, eye: Vec3, n: usize, seed: u64, var: f64) -> MeasurementSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = mesh
            .sample_surface(n, &mut rng)
            .into_iter()
            .filter(|(p, nrm)| nrm.dot(&(eye - p)) > 0.0)
            .collect();
        let points: Vec<Vec3> = samples.iter().map(|s| s.0).collect();
        let rays: Vec<Vec3> = points.iter().map(|p| (p - eye).normalize()).collect();
        let axis = (-eye).normalize();
        MeasurementSet::new(points.clone(), vec![var; points.len()], rays, axis, 0).unwrap()
    }

    fn random_pose(rng: &mut impl Rng, trans: f64, rot_deg: f64) -> Pose {
        let dir = |rng: &mut dyn rand::RngCore| {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            v.normalize()
        };
        let t = dir(rng) * rng.random_range(0.0..trans);
        let w = dir(rng) * rng.random_range(0.0..rot_deg).to_radians();
        Pose::from_axis_angle(w, t)
    }

    #[test]
    fn principal_pixel_back_projects_on_axis() {
        let cam = CameraModel::new(100.0, 100.0, 2.0, 1.0, 5, 3, 10.0).unwrap();
        let mut depth = DepthMap::empty(5, 3);
        depth.set(5 + 2, 500.0, 1.0);
        let mask = vec![true; 15];
        let set = build_measurement_set(&depth, &mask, &cam, &Pose::identity(), 4, 1).unwrap();
        assert_eq!(set.points_world(), &[Vec3::new(0.0, 0.0, 500.0)]);
        assert_eq!(set.ray_dirs_world(), &[Vec3::z()]);
        let empty = DepthMap::empty(5, 3);
        assert!(matches!(
            build_measurement_set(&empty, &mask, &cam, &Pose::identity(), 4, 1),
            Err(Error::EmptyMeasurement(4))
        ));
    }

    #[test]
    fn residuals_on_the_surface_are_small() {
        let (mesh, grid) = bracket();
        let set = surface_set(mesh, Vec3::new(100.0, 80.0, 200.0), 3000, 1, 0.1);
        let r = sdf_residuals(&[set], &Pose::identity(), grid);
        let worst = r.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(worst <= 1.2 * grid.voxel(), "{worst}");
        assert!(sdf_residuals(&[], &Pose::identity(), grid).is_empty());
    }

    #[test]
    fn translating_the_estimate_shifts_face_residuals() {
        let grid = cube_grid();
        let pts: Vec<Vec3> = (0..25)
            .map(|k| Vec3::new(20.0, (k % 5) as f64 * 4.0 - 8.0, (k / 5) as f64 * 4.0 - 8.0))
            .collect();
        let rays = vec![-Vec3::x(); pts.len()];
        let set = MeasurementSet::new(pts, vec![0.1; 25], rays, -Vec3::x(), 0).unwrap();
        let base = sdf_residuals(std::slice::from_ref(&set), &Pose::identity(), grid);
        let moved = sdf_residuals(&[set], &Pose::from_translation(Vec3::new(5.0, 0.0, 0.0)), grid);
        for (a, b) in base.iter().zip(&moved) {
            assert!((b - a - 5.0).abs() < 0.05, "{a} {b}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (mesh, grid) = bracket();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = surface_set(mesh, Vec3::new(-60.0, 90.0, 150.0), 400, 2, 0.1);
        for _ in 0..20 {
            let pose = random_pose(&mut rng, 3.0, 5.0);
            let jac = sdf_jacobian(std::slice::from_ref(&set), &pose, grid);
            let h = 1e-4;
            for k in 0..6 {
                let mut e = Vec6::zeros();
                e[k] = h;
                let plus = sdf_residuals(
                    std::slice::from_ref(&set),
                    &Twist::from_vector(&e).exp().compose(&pose),
                    grid,
                );
                let minus = sdf_residuals(
                    std::slice::from_ref(&set),
                    &Twist::from_vector(&-e).exp().compose(&pose),
                    grid,
                );
                for i in 0..set.len() {
                    let fd = (plus[i] - minus[i]) / (2.0 * h);
                    let row_norm = jac.row(i).norm().max(1e-3);
                    assert!((jac[(i, k)] - fd).abs() / row_norm < 1e-3, "{} vs {fd}", jac[(i, k)]);
                }
            }
        }
    }

    #[test]
    fn cube_face_row_and_sphere_centre_row() {
        let grid = cube_grid();
        let set = MeasurementSet::new(
            vec![Vec3::new(20.0, 3.0, -2.0)],
            vec![1.0],
            vec![-Vec3::x()],
            -Vec3::x(),
            0,
        )
        .unwrap();
        let jac = sdf_jacobian(&[set], &Pose::identity(), grid);
        assert!((jac[(0, 0)] - 1.0).abs() < 0.02 && jac[(0, 1)].abs() < 0.02 && jac[(0, 2)].abs() < 0.02);

        let sphere = analytic_sphere(20.0);
        let set = MeasurementSet::new(vec![Vec3::zeros()], vec![1.0], vec![Vec3::z()], Vec3::z(), 0).unwrap();
        let jac = sdf_jacobian(&[set], &Pose::identity(), &sphere);
        assert!(jac.norm() < 1e-6);
    }

    #[test]
    fn variance_follows_ray_alignment() {
        let grid = cube_grid();
        let p = vec![Vec3::new(20.0, 0.0, 0.0)];
        let along = MeasurementSet::new(p.clone(), vec![0.5], vec![-Vec3::x()], -Vec3::x(), 0).unwrap();
        let v = sdf_variance(&[along], &Pose::identity(), grid);
        assert!((v[0] - 0.5).abs() < 0.02, "{}", v[0]);
        let tangent = MeasurementSet::new(p, vec![0.5], vec![Vec3::y()], Vec3::y(), 0).unwrap();
        assert_eq!(sdf_variance(&[tangent], &Pose::identity(), grid)[0], SDF_VARIANCE_FLOOR);
    }

    #[test]
    fn monte_carlo_sdf_variance() {
        // Depth noise moves a point along its ray by dz/cos; the induced SDF
        // spread must match the propagated variance.
        let sphere = SdfGrid::from_fn(Vec3::repeat(-40.0), 0.5, [161, 161, 161], |p| p.norm() - 25.0);
        let eye = Vec3::new(0.0, 0.0, 300.0);
        let axis = -Vec3::z();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for target in [Vec3::new(0.0, 0.0, 25.0), Vec3::new(10.0, 5.0, 500f64.sqrt())] {
            let ray = (target - eye).normalize();
            let sigma_z = 0.8;
            let set = MeasurementSet::new(vec![target], vec![sigma_z * sigma_z], vec![ray], axis, 0).unwrap();
            let predicted = sdf_variance(std::slice::from_ref(&set), &Pose::identity(), &sphere)[0];
            let cos = ray.dot(&axis);
            let draws: Vec<f64> = (0..2000)
                .map(|_| sphere.sample(&(target + ray * (sigma_z * normal.sample(&mut rng) / cos))))
                .collect();
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
            assert!((var / predicted - 1.0).abs() < 0.15, "{var} vs {predicted}");
        }
    }

    #[test]
    fn zero_residual_is_a_fixed_point() {
        let cube = SdfGrid::from_fn(Vec3::repeat(-40.0), 1.0, [81, 81, 81], |p| {
            let q = p.abs() - Vec3::repeat(15.0);
            q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
        });
        let mut pts = Vec::new();
        for a in [-10.0, 0.0, 10.0] {
            for b in [-10.0, 0.0, 10.0] {
                pts.push(Vec3::new(15.0, a, b));
                pts.push(Vec3::new(a, 15.0, b));
                pts.push(Vec3::new(a, b, -15.0));
            }
        }
        let rays: Vec<Vec3> = pts.iter().map(|p| -p.normalize()).collect();
        let set = MeasurementSet::new(pts.clone(), vec![0.1; pts.len()], rays, Vec3::z(), 0).unwrap();
        let res = refine(&[set], &Pose::identity(), &cube, &RefineOptions::default());
        assert!(res.converged && res.iterations <= 2, "{res:?}");
        assert!(res.pose.translation().norm() < 0.01 && res.pose.rotation_angle().to_degrees() < 0.01);
    }

    #[test]
    fn bracket_recovers_from_perturbations() {
        let (mesh, grid) = bracket();
        let sets = [
            surface_set(mesh, Vec3::new(120.0, 80.0, 200.0), 3000, 3, 0.05),
            surface_set(mesh, Vec3::new(-150.0, -40.0, 160.0), 3000, 4, 0.05),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ok = 0;
        for _ in 0..20 {
            let init = random_pose(&mut rng, 10.0, 10.0);
            let res = refine(&sets, &init, grid, &RefineOptions::default());
            let t = res.pose.translation().norm();
            let r = res.pose.rotation_angle().to_degrees();
            if t < 0.5 && r < 0.5 {
                ok += 1;
            }
            // Accepted steps never increase the cost.
            assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
            let sym = (res.covariance - res.covariance.transpose()).abs().max();
            assert!(sym <= 1e-9 * res.covariance.abs().max().max(1.0));
        }
        assert!(ok >= 19, "{ok}/20");
    }

    #[test]
    fn sphere_is_flagged_rank_deficient() {
        let grid = analytic_sphere(20.0);
        let mesh = TriangleMesh::icosphere(20.0, 3);
        let set = surface_set(&mesh, Vec3::new(0.0, 0.0, 200.0), 2000, 5, 0.1);
        // Project the samples onto the exact sphere.
        let pts: Vec<Vec3> = set.points_world().iter().map(|p| p.normalize() * 20.0).collect();
        let set = MeasurementSet::new(
            pts,
            set.depth_variance().to_vec(),
            set.ray_dirs_world().to_vec(),
            Vec3::z(),
            0,
        )
        .unwrap();
        let res = refine(&[set], &Pose::identity(), &grid, &RefineOptions::default());
        assert!(res.rank_deficient(), "rank {}", res.rank);
        assert_eq!(res.rank, 3);
    }

    #[test]
    fn nested_sets_shrink_covariance() {
        let (mesh, grid) = bracket();
        let a = surface_set(mesh, Vec3::new(120.0, 80.0, 200.0), 2000, 6, 0.1);
        let b = surface_set(mesh, Vec3::new(-100.0, 50.0, -150.0), 2000, 7, 0.1);
        let ca = pose_covariance(std::slice::from_ref(&a), &Pose::identity(), grid);
        let cb = pose_covariance(&[a, b], &Pose::identity(), grid);
        assert_eq!((ca.rank, cb.rank), (6, 6));
        assert!(cb.matrix.determinant() <= ca.matrix.determinant());
    }

    #[test]
    fn umeyama_recovers_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_pose(&mut rng, 20.0, 40.0);
        let src: Vec<Vec3> = (0..10)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 30.0)
            .collect();
        let dst = t.transform_cloud(&src);
        let est = rigid_align(&src, &dst).unwrap();
        assert!((est.to_matrix() - t.to_matrix()).abs().max() < 1e-9);
    }

    /// Replaces a fifth of the points with uniform clutter around the part.
    fn with_outliers(set: &MeasurementSet, rng: &mut impl Rng) -> MeasurementSet {
        let mut points = set.points_world().to_vec();
        for p in points.iter_mut() {
            if rng.random::<f64>() < 0.2 {
                *p = Vec3::new(
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-40.0..60.0),
                );
            }
        }
        let rays = set.ray_dirs_world().to_vec();
        MeasurementSet::new(
            points,
            set.depth_variance().to_vec(),
            rays,
            *set.optical_axis_world(),
            set.view_id(),
        )
        .unwrap()
    }

    #[test]
    fn outliers_hurt_refine_less_than_untrimmed_icp() {
        let (mesh, grid) = bracket();
        let clean = [
            surface_set(mesh, Vec3::new(120.0, 80.0, 200.0), 1500, 11, 0.05),
            surface_set(mesh, Vec3::new(-150.0, -40.0, 160.0), 1500, 12, 0.05),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let untrimmed = RefineOptions {
            icp_trim: 0.0,
            max_iters: 100,
            ..RefineOptions::default()
        };
        let (mut sdf, mut icp) = (Vec::new(), Vec::new());
        for _ in 0..50 {
            let sets: Vec<MeasurementSet> = clean.iter().map(|s| with_outliers(s, &mut rng)).collect();
            let init = random_pose(&mut rng, 5.0, 5.0);
            sdf.push(refine(&sets, &init, grid, &untrimmed).pose.translation().norm());
            icp.push(
                icp_refine_baseline(&sets, &init, mesh, &untrimmed)
                    .pose
                    .translation()
                    .norm(),
            );
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let (a, b) = (median(&mut sdf), median(&mut icp));
        assert!(a < b, "refine {a} vs icp {b}");
        assert!(a < 0.5, "{a}");
    }

    #[test]
    fn icp_fixed_point_and_convergence() {
        let (mesh, _) = bracket();
        let sets = [
            surface_set(mesh, Vec3::new(120.0, 80.0, 200.0), 2000, 8, 0.05),
            surface_set(mesh, Vec3::new(-150.0, -40.0, 160.0), 2000, 9, 0.05),
        ];
        let opts = RefineOptions::default();
        let res = icp_refine_baseline(&sets, &Pose::identity(), mesh, &opts);
        assert!(res.pose.translation().norm() < 0.01 && res.pose.rotation_angle().to_degrees() < 0.01);
        let init = Pose::from_axis_angle(Vec3::new(0.05, -0.03, 0.02), Vec3::new(2.0, -1.5, 1.0));
        let res = icp_refine_baseline(&sets, &init, mesh, &RefineOptions { max_iters: 200, ..opts });
        assert!(res.pose.translation().norm() < 0.3, "{:?}", res.pose);
        assert_eq!(res.rank, 6);
    }

    #[test]
    fn result_json_layout() {
        let (mesh, grid) = bracket();
        let set = surface_set(mesh, Vec3::new(120.0, 80.0, 200.0), 500, 1, 0.1);
        let res = refine(&[set], &Pose::identity(), grid, &RefineOptions::default());
        let j = res.to_json();
        assert_eq!(j["pose"].as_array().unwrap().len(), 16);
        assert_eq!(j["covariance"].as_array().unwrap().len(), 36);
        assert_eq!(j["covariance"][1].as_f64().unwrap(), res.covariance[(0, 1)]);
    }
}
