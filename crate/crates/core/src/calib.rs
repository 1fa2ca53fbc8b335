//! Photometric calibration: camera response recovery from exposure stacks
//! and BSDF coefficient estimation by inverse rendering.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{trace_paths, BsdfParams, PathImage, RadianceImage, SceneDescription, DEFAULT_BOUNCES};
use crate::uncertainty::IntensityImage;

pub const LEVELS: usize = 256;
/// Pixel value pinned to ln X = 0.
pub const GAUGE_LEVEL: usize = 128;
/// Recovered radiance at or below this level is unreliable.
pub const DARK_LEVEL: u8 = 5;
/// Recovered radiance at or above this level is unreliable.
pub const SATURATED_LEVEL: u8 = 250;

/// Camera response as ln X for every 8-bit pixel value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    log_exposure: Vec<f64>,
    smoothing_lambda: f64,
    /// Exposure at each level, kept non-decreasing for the forward map.
    #[serde(skip)]
    exposure: Vec<f64>,
}

impl ResponseCurve {
    pub fn from_table(log_exposure: Vec<f64>, smoothing_lambda: f64) -> Result<Self> {
        if log_exposure.len() != LEVELS || log_exposure.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("response table needs 256 finite entries".into()));
        }
        let mut exposure: Vec<f64> = log_exposure.iter().map(|v| v.exp()).collect();
        for k in 1..LEVELS {
            exposure[k] = exposure[k].max(exposure[k - 1]);
        }
        Ok(Self {
            log_exposure,
            smoothing_lambda,
            exposure,
        })
    }

    /// `I = (X / X_max)^(1/γ)`, gauged so level 128 sits at X = 1.
    pub fn gamma(gamma: f64) -> Self {
        let table = (0..LEVELS)
            .map(|v| gamma * ((v as f64).max(0.5) / GAUGE_LEVEL as f64).ln())
            .collect();
        Self::from_table(table, 0.0).expect("finite table")
    }

    /// `I = X · 128/255`.
    pub fn linear() -> Self {
        Self::gamma(1.0)
    }

    pub fn table(&self) -> &[f64] {
        &self.log_exposure
    }

    pub fn smoothing_lambda(&self) -> f64 {
        self.smoothing_lambda
    }

    pub fn log_exposure(&self, level: u8) -> f64 {
        self.log_exposure[level as usize]
    }

    /// Forward map: exposure `X = E·Δt` to normalized intensity, piecewise
    /// linear in X through (0, 0) and the table from level 1 up, saturating
    /// at 1.
    pub fn apply(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return 0.0;
        }
        let e = &self.exposure;
        if x >= e[LEVELS - 1] {
            return 1.0;
        }
        if x <= e[1] {
            return x / e[1] / 255.0;
        }
        // First level whose exposure exceeds x.
        let k = e[1..].partition_point(|&v| v <= x) + 1;
        let (lo, hi) = (e[k - 1], e[k]);
        let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
        ((k - 1) as f64 + t) / 255.0
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "log_exposure": self.log_exposure,
            "smoothing_lambda": self.smoothing_lambda,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            log_exposure: Vec<f64>,
            #[serde(default)]
            smoothing_lambda: f64,
        }
        let raw: Raw = serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(raw.log_exposure, raw.smoothing_lambda)
    }
}

/// 8-bit level of a normalized intensity.
pub fn quantize(i: f64) -> u8 {
    (i * 255.0).round().clamp(0.0, 255.0) as u8
}

fn hat(level: usize) -> f64 {
    level.min(255 - level) as f64
}

/// Recovers ln X per level from registered images of a static scene taken
/// at the given exposure times, by linear least squares with hat weights
/// and a second-difference smoothness term.
pub fn recover_response(
    images: &[IntensityImage],
    exposures: &[f64],
    lambda: f64,
    samples: usize,
) -> Result<ResponseCurve> {
    if images.len() != exposures.len() {
        return Err(Error::Calibration("one exposure time per image".into()));
    }
    if images.len() < 3 {
        return Err(Error::Calibration(format!(
            "need at least 3 exposures, got {}",
            images.len()
        )));
    }
    if exposures.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Calibration("exposure times must be positive".into()));
    }
    let (lo, hi) = exposures
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    if hi / lo < 4.0 {
        return Err(Error::Calibration(format!(
            "exposures span only {:.2}x, need 4x",
            hi / lo
        )));
    }
    let (w, h) = (images[0].width(), images[0].height());
    if images.iter().any(|im| im.width() != w || im.height() != h) {
        return Err(Error::Dimension("exposure stack images differ in size".into()));
    }
    let n_pixels = w * h;
    let samples = samples.clamp(1, n_pixels);
    let picks: Vec<usize> = (0..samples).map(|k| k * n_pixels / samples).collect();

    let n_unknowns = LEVELS + samples;
    let n_rows = samples * images.len() + 1 + (LEVELS - 2);
    let mut a = DMatrix::<f64>::zeros(n_rows, n_unknowns);
    let mut b = DVector::<f64>::zeros(n_rows);
    let mut row = 0;
    for (s, &pix) in picks.iter().enumerate() {
        for (img, &dt) in images.iter().zip(exposures) {
            let z = quantize(img.values()[pix]) as usize;
            let wz = hat(z);
            a[(row, z)] = wz;
            a[(row, LEVELS + s)] = -wz;
            b[row] = wz * dt.ln();
            row += 1;
        }
    }
    a[(row, GAUGE_LEVEL)] = 1.0;
    row += 1;
    for k in 1..LEVELS - 1 {
        let wk = lambda * hat(k);
        a[(row, k - 1)] = wk;
        a[(row, k)] = -2.0 * wk;
        a[(row, k + 1)] = wk;
        row += 1;
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Calibration("rank-deficient response system".into()));
    }
    let x = svd
        .solve(&b, 1e-12 * smax)
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let table: Vec<f64> = x.rows(0, LEVELS).iter().copied().collect();
    let mid = DARK_LEVEL as usize..=SATURATED_LEVEL as usize;
    if table[mid.clone()].windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Calibration(
            "recovered response is not increasing over the mid-range".into(),
        ));
    }
    ResponseCurve::from_table(table, lambda)
}

/// `E = exp(g(v))/Δt`; levels outside the reliable band are flagged invalid.
pub fn radiance_from_image(img: &IntensityImage, response: &ResponseCurve, exposure: f64) -> Result<RadianceImage> {
    if !(exposure > 0.0) {
        return Err(Error::Contract(format!("exposure must be positive, got {exposure}")));
    }
    let mut radiance = Vec::with_capacity(img.values().len());
    let mut valid = Vec::with_capacity(img.values().len());
    for &i in img.values() {
        let v = quantize(i);
        radiance.push(response.log_exposure(v).exp() / exposure);
        valid.push(v > DARK_LEVEL && v < SATURATED_LEVEL);
    }
    let n = radiance.len();
    Ok(RadianceImage {
        width: img.width(),
        height: img.height(),
        radiance,
        depth: vec![0.0; n],
        valid,
        object: vec![None; n],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Finite-difference step on each parameter.
    pub fd_step: f64,
    pub bounces: usize,
    /// Fit reports convergence when the best relative loss is below this.
    pub tolerance: f64,
    pub min_pixels: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 200,
            lr_decay: 1.0,
            fd_step: 1e-3,
            bounces: DEFAULT_BOUNCES,
            tolerance: 1e-3,
            min_pixels: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: BsdfParams,
    /// Loss (mean squared radiance error) at the start of every epoch, then
    /// the loss of the returned parameters.
    pub loss_history: Vec<f64>,
    /// Best loss divided by the mean squared target radiance.
    pub relative_loss: f64,
    pub converged: bool,
    pub epochs: usize,
}

/// Loss of one material over a fixed set of traced pixels.
pub struct FitProblem {
    paths: PathImage,
    pixels: Vec<usize>,
    target: Vec<f64>,
    materials: Vec<BsdfParams>,
    object: usize,
    ambient: f64,
    intensity: f64,
    bounces: usize,
    target_energy: f64,
}

impl FitProblem {
    /// Traces the known scene once; only the BSDF of `object` varies.
    pub fn new(target: &RadianceImage, scene: &SceneDescription, object: usize, opts: &FitOptions) -> Result<Self> {
        if target.width != scene.camera.width || target.height != scene.camera.height {
            return Err(Error::Dimension("target and scene camera differ in size".into()));
        }
        if object >= scene.objects.len() {
            return Err(Error::Config(format!("no object {object} in scene")));
        }
        let bounces = opts.bounces.max(1);
        let paths = trace_paths(scene, bounces);
        let pixels: Vec<usize> = (0..target.len())
            .filter(|&i| target.valid[i] && target.radiance[i].is_finite() && paths.paths[i].object() == Some(object))
            .collect();
        if pixels.len() < opts.min_pixels {
            return Err(Error::Fit(format!(
                "only {} reliable object pixels, need {}",
                pixels.len(),
                opts.min_pixels
            )));
        }
        let t: Vec<f64> = pixels.iter().map(|&i| target.radiance[i]).collect();
        let target_energy = t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        Ok(Self {
            paths,
            target: t,
            pixels,
            materials: scene.objects.iter().map(|o| o.material).collect(),
            object,
            ambient: scene.ambient,
            intensity: scene.light.intensity,
            bounces,
            target_energy,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    /// Mean squared radiance error.
    pub fn loss(&self, params: &BsdfParams) -> f64 {
        let mut mats = self.materials.clone();
        mats[self.object] = *params;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&self.target)
            .map(|(&i, t)| {
                let r = self.paths.paths[i].shade(&mats, self.ambient, self.bounces, |_, _| self.intensity);
                (r - t).powi(2)
            })
            .sum();
        sum / self.pixels.len() as f64
    }

    pub fn relative(&self, loss: f64) -> f64 {
        loss / self.target_energy.max(1e-300)
    }

    /// Central differences, one-sided at the box edges.
    pub fn gradient(&self, params: &BsdfParams, step: f64) -> [f64; 4] {
        let x = params.to_array();
        std::array::from_fn(|k| {
            let mut lo = x;
            let mut hi = x;
            hi[k] = (x[k] + step).min(1.0);
            lo[k] = (x[k] - step).max(0.0);
            let span = hi[k] - lo[k];
            (self.loss(&BsdfParams::from_array(hi)) - self.loss(&BsdfParams::from_array(lo))) / span
        })
    }
}

/// Fits the BSDF of `object` so the rendered radiance matches `target`,
/// with Adam on finite-difference gradients. Returns the best parameters
/// seen.
pub fn fit_bsdf(
    target: &RadianceImage,
    scene: &SceneDescription,
    object: usize,
    init: &BsdfParams,
    opts: &FitOptions,
) -> Result<FitReport> {
    let problem = FitProblem::new(target, scene, object, opts)?;
    let mut x = init.to_array();
    let mut best = (problem.loss(init), x);
    if !best.0.is_finite() {
        return Err(Error::Fit("non-finite loss at the initial parameters".into()));
    }
    let mut history = Vec::with_capacity(opts.epochs + 1);
    let (mut m, mut v) = ([0.0; 4], [0.0; 4]);
    let mut lr = opts.lr;
    for epoch in 0..opts.epochs {
        let params = BsdfParams::from_array(x);
        let loss = problem.loss(&params);
        if !loss.is_finite() {
            return Err(Error::Fit(format!("non-finite loss at epoch {epoch}")));
        }
        history.push(loss);
        if loss < best.0 {
            best = (loss, x);
        }
        let g = problem.gradient(&params, opts.fd_step);
        let t = (epoch + 1) as i32;
        for k in 0..4 {
            m[k] = opts.beta1 * m[k] + (1.0 - opts.beta1) * g[k];
            v[k] = opts.beta2 * v[k] + (1.0 - opts.beta2) * g[k] * g[k];
            let m_hat = m[k] / (1.0 - opts.beta1.powi(t));
            let v_hat = v[k] / (1.0 - opts.beta2.powi(t));
            x[k] = (x[k] - lr * m_hat / (v_hat.sqrt() + 1e-12)).clamp(0.0, 1.0);
        }
        lr *= opts.lr_decay;
    }
    if opts.epochs > 0 {
        let last = problem.loss(&BsdfParams::from_array(x));
        if last < best.0 {
            best = (last, x);
        }
        history.push(best.0);
    }
    let relative_loss = problem.relative(best.0);
    Ok(FitReport {
        params: BsdfParams::from_array(best.1),
        loss_history: history,
        relative_loss,
        converged: opts.epochs > 0 && relative_loss <= opts.tolerance,
        epochs: opts.epochs,
    })
}

/// Absolute per-pixel error between two radiance images.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub width: usize,
    pub height: usize,
    /// `|target − rendered|`, NaN where either pixel is invalid.
    pub error: Vec<f64>,
    pub mean: f64,
    pub p95: f64,
}

pub fn residual_map(target: &RadianceImage, rendered: &RadianceImage) -> Result<ResidualMap> {
    if (target.width, target.height) != (rendered.width, rendered.height) {
        return Err(Error::Dimension("residual map inputs differ in size".into()));
    }
    let error: Vec<f64> = (0..target.len())
        .map(|i| {
            if target.valid[i] && rendered.valid[i] {
                (target.radiance[i] - rendered.radiance[i]).abs()
            } else {
                f64::NAN
            }
        })
        .collect();
    let mut finite: Vec<f64> = error.iter().copied().filter(|e| e.is_finite()).collect();
    finite.sort_by(f64::total_cmp);
    let (mean, p95) = if finite.is_empty() {
        (0.0, 0.0)
    } else {
        let idx = ((finite.len() as f64 * 0.95).ceil() as usize).clamp(1, finite.len()) - 1;
        (finite.iter().sum::<f64>() / finite.len() as f64, finite[idx])
    };
    Ok(ResidualMap {
        width: target.width,
        height: target.height,
        error,
        mean,
        p95,
    })
}
