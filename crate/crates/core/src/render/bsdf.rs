use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const MIN_ROUGHNESS: f64 = 0.02;
/// Normal-incidence reflectance of a dielectric at full `specular`.
const DIELECTRIC_F0: f64 = 0.08;

/// Grayscale reduced principled BSDF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdfParams {
    pub base_color: f64,
    pub metallic: f64,
    pub roughness: f64,
    pub specular: f64,
}

impl BsdfParams {
    pub fn new(base_color: f64, metallic: f64, roughness: f64, specular: f64) -> Result<Self> {
        let p = Self {
            base_color,
            metallic,
            roughness,
            specular,
        };
        if p.to_array().iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(p)
        } else {
            Err(Error::Contract(format!("BSDF parameters outside [0, 1]: {p:?}")))
        }
    }

    /// All parameters at 0.5.
    pub fn medium() -> Self {
        Self::from_array([0.5; 4])
    }

    pub fn matte() -> Self {
        Self::from_array([0.7, 0.0, 0.8, 0.2])
    }

    pub fn chrome() -> Self {
        Self::from_array([0.9, 0.95, 0.05, 0.5])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.base_color, self.metallic, self.roughness, self.specular]
    }

    /// Builds parameters from `[base, metallic, roughness, specular]`,
    /// clamped to [0, 1].
    pub fn from_array(a: [f64; 4]) -> Self {
        let c = a.map(|v| v.clamp(0.0, 1.0));
        Self {
            base_color: c[0],
            metallic: c[1],
            roughness: c[2],
            specular: c[3],
        }
    }

    fn alpha(&self) -> f64 {
        let r = self.roughness.max(MIN_ROUGHNESS);
        r * r
    }

    /// Interpolates between presets.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let (a, b) = (a.to_array(), b.to_array());
        Self::from_array(std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t))
    }
}

#[inline]
fn schlick(f0: f64, cos: f64) -> f64 {
    let m = (1.0 - cos).clamp(0.0, 1.0);
    let m2 = m * m;
    f0 + (1.0 - f0) * m2 * m2 * m
}

/// Fresnel reflectance at `cos` between the half vector and a direction.
///
/// The dielectric lobe is scaled by `specular` as a whole, so that at
/// normal incidence it equals `mix(0.08·specular, base_color, metallic)` and
/// it vanishes entirely for a non-metal with `specular = 0`.
pub fn fresnel(p: &BsdfParams, cos: f64) -> f64 {
    (1.0 - p.metallic) * p.specular * schlick(DIELECTRIC_F0, cos) + p.metallic * schlick(p.base_color, cos)
}

#[inline]
fn ggx_d(alpha: f64, n_h: f64) -> f64 {
    let a2 = alpha * alpha;
    let t = n_h * n_h * (a2 - 1.0) + 1.0;
    a2 / (std::f64::consts::PI * t * t)
}

#[inline]
fn smith_g1(alpha: f64, n_v: f64) -> f64 {
    let a2 = alpha * alpha;
    2.0 * n_v / (n_v + (a2 + (1.0 - a2) * n_v * n_v).sqrt())
}

/// BRDF value for light arriving from `wi` and leaving along `wo` (both
/// pointing away from the surface). Zero below the horizon.
pub fn eval_bsdf(p: &BsdfParams, n: &Vec3, wi: &Vec3, wo: &Vec3) -> f64 {
    let n_i = n.dot(wi);
    let n_o = n.dot(wo);
    if n_i <= 0.0 || n_o <= 0.0 {
        return 0.0;
    }
    // Light the dielectric coat reflects is not available to the diffuse
    // base.
    let coat = |c: f64| 1.0 - (1.0 - p.metallic) * p.specular * schlick(DIELECTRIC_F0, c);
    let diffuse = (1.0 - p.metallic) * p.base_color / std::f64::consts::PI * coat(n_i) * coat(n_o);
    let h = wi + wo;
    let len = h.norm();
    if len < 1e-12 {
        return diffuse;
    }
    let h = h / len;
    let alpha = p.alpha();
    let d = ggx_d(alpha, n.dot(&h).max(0.0));
    let g = smith_g1(alpha, n_i) * smith_g1(alpha, n_o);
    let f = fresnel(p, wi.dot(&h).max(0.0));
    diffuse + d * g * f / (4.0 * n_i * n_o)
}

/// Mirror reflection of `w` (pointing away from the surface) about `n`.
pub fn reflect(w: &Vec3, n: &Vec3) -> Vec3 {
    n * (2.0 * n.dot(w)) - w
}
