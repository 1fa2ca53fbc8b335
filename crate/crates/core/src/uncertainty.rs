//! Per-pixel depth uncertainty of pattern-projected stereo.
//!
//! The disparity variance of a patch follows from the Fisher information of
//! its SSD matching cost, which only depends on the x-gradient energy of the
//! patch. It is then pushed through `z = fx·b/d` to a depth variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;

/// Gradient energies below this are treated as a flat patch.
pub const MIN_GRADIENT_ENERGY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidMeasurement(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Builds an image from `f(x, y)`, clamping to [0, 1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Bilinear lookup; `None` outside `[0, w−1] × [0, h−1]`.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
        let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
        Some(top * (1.0 - ty) + bottom * ty)
    }
}

/// Depth measurements registered to the left image.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    variance: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// A map with every pixel missing.
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            depth: vec![0.0; n],
            variance: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Builds a map from raw channels. Pixels whose depth or variance is not
    /// finite and positive are marked invalid.
    pub fn from_channels(
        width: usize,
        height: usize,
        depth: Vec<f64>,
        variance: Vec<f64>,
        valid: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n = width * height;
        if depth.len() != n || variance.len() != n || valid.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::Dimension(format!(
                "depth channels do not match {width}x{height}"
            )));
        }
        let mut map = Self::empty(width, height);
        for i in 0..n {
            if valid.as_ref().is_none_or(|v| v[i]) {
                map.set(i, depth[i], variance[i]);
            }
        }
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    /// Sets pixel `i` (row-major); invalidates it unless both values are
    /// finite and positive.
    pub fn set(&mut self, i: usize, depth: f64, variance: f64) {
        let ok = depth > 0.0 && variance > 0.0 && depth.is_finite() && variance.is_finite();
        self.valid[i] = ok;
        self.depth[i] = if ok { depth } else { 0.0 };
        self.variance[i] = if ok { variance } else { 0.0 };
    }

    pub fn invalidate(&mut self, i: usize) {
        self.valid[i] = false;
        self.depth[i] = 0.0;
        self.variance[i] = 0.0;
    }

    /// `(depth, variance)` of a valid pixel.
    pub fn get(&self, i: usize) -> Option<(f64, f64)> {
        self.valid[i].then(|| (self.depth[i], self.variance[i]))
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    /// Odd patch edge length in pixels.
    pub patch: usize,
    /// Image noise standard deviation, in normalized intensity.
    pub sigma_img: f64,
    /// Predicted maps drop pixels whose σ_z exceeds this (mm).
    pub tau_sigma: Option<f64>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            patch: 7,
            sigma_img: 0.01,
            tau_sigma: None,
        }
    }
}

/// Sum of squared central-difference x-gradients over a patch centred at
/// `(x, y)`; `None` when the patch or its gradient stencil leaves the image.
pub fn gradient_energy(img: &IntensityImage, x: f64, y: usize, patch: usize) -> Option<f64> {
    let half = (patch / 2) as f64;
    if x - half - 1.0 < 0.0 || x + half + 1.0 > (img.width - 1) as f64 || y < patch / 2 || y + patch / 2 >= img.height {
        return None;
    }
    let mut energy = 0.0;
    for py in y - patch / 2..=y + patch / 2 {
        let yf = py as f64;
        for k in 0..patch {
            let px = x - half + k as f64;
            let g = 0.5 * (img.bilinear(px + 1.0, yf)? - img.bilinear(px - 1.0, yf)?);
            energy += g * g;
        }
    }
    Some(energy)
}

/// Disparity variance of a single image patch, `σ_I² / Σ g_x²`.
pub fn patch_disparity_variance(img: &IntensityImage, x: f64, y: usize, patch: usize, sigma_img: f64) -> Option<f64> {
    let energy = gradient_energy(img, x, y, patch)?;
    (energy >= MIN_GRADIENT_ENERGY).then(|| sigma_img * sigma_img / energy)
}

/// Disparity variance of left pixel `u` matched at disparity `d`: the
/// gradient energy is taken from the right image around `(u_x − d, u_y)`.
/// `None` marks an invalid (flat or out-of-bounds) patch.
pub fn disparity_variance(
    left: &IntensityImage,
    right: &IntensityImage,
    disparity: f64,
    u: (usize, usize),
    patch: usize,
    sigma_img: f64,
) -> Option<f64> {
    debug_assert_eq!((left.width, left.height), (right.width, right.height));
    if patch.is_multiple_of(2) || !(sigma_img > 0.0) {
        return None;
    }
    // The left patch must fit as well, since both windows enter the cost.
    gradient_energy(left, u.0 as f64, u.1, patch)?;
    patch_disparity_variance(right, u.0 as f64 - disparity, u.1, patch, sigma_img)
}

/// `σ_z² = F² σ_d²` with `F = ∂z/∂d = −z²/(fx·b)`.
pub fn depth_variance(sigma_d_sq: f64, z: f64, cam: &CameraModel) -> f64 {
    let f = z * z / (cam.fx * cam.baseline);
    f * f * sigma_d_sq
}

/// The larger of the left and right depth variances; invalid if either is.
pub fn combined_depth_variance(from_left: Option<f64>, from_right: Option<f64>) -> Option<f64> {
    Some(from_left?.max(from_right?))
}

/// Depth variance of one left-image pixel at depth `z`, or `None`.
pub fn pixel_depth_variance(
    left: &IntensityImage,
    right: &IntensityImage,
    u: (usize, usize),
    z: f64,
    cam: &CameraModel,
    opts: &ScoreOptions,
) -> Option<f64> {
    if !(z > 0.0) || opts.patch.is_multiple_of(2) || !(opts.sigma_img > 0.0) {
        return None;
    }
    let d = cam.disparity(z);
    let var_l =
        patch_disparity_variance(left, u.0 as f64, u.1, opts.patch, opts.sigma_img).map(|v| depth_variance(v, z, cam));
    let var_r = patch_disparity_variance(right, u.0 as f64 - d, u.1, opts.patch, opts.sigma_img)
        .map(|v| depth_variance(v, z, cam));
    combined_depth_variance(var_l, var_r)
}

/// Fills variance and validity of `depth` from the stereo pattern pair.
/// Pixels whose σ_z exceeds `opts.tau_sigma` are dropped.
pub fn score_depth_map(
    left: &IntensityImage,
    right: &IntensityImage,
    depth: &DepthMap,
    cam: &CameraModel,
    opts: &ScoreOptions,
) -> Result<DepthMap> {
    let dims = (depth.width, depth.height);
    if (left.width, left.height) != dims || (right.width, right.height) != dims {
        return Err(Error::Dimension("stereo images and depth map differ in size".into()));
    }
    if opts.patch.is_multiple_of(2) || !(opts.sigma_img > 0.0) {
        return Err(Error::Config(format!(
            "patch must be odd and sigma_img positive, got {} and {}",
            opts.patch, opts.sigma_img
        )));
    }
    let w = depth.width;
    let scored: Vec<Option<(f64, f64)>> = (0..depth.len())
        .into_par_iter()
        .map(|i| {
            let z = depth.depth[i];
            if !depth.valid[i] {
                return None;
            }
            let var = pixel_depth_variance(left, right, (i % w, i / w), z, cam, opts)?;
            if opts.tau_sigma.is_some_and(|tau| var.sqrt() > tau) {
                return None;
            }
            Some((z, var))
        })
        .collect();
    let mut out = DepthMap::empty(depth.width, depth.height);
    for (i, s) in scored.into_iter().enumerate() {
        if let Some((z, var)) = s {
            out.set(i, z, var);
        }
    }
    Ok(out)
}
