//! Image file formats: PFM for float channels, PNG for intensities and
//! 16-bit depth.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::uncertainty::{DepthMap, IntensityImage};

/// Single-channel float image, row-major from the top row.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

/// Writes a little-endian greyscale PFM. PFM stores rows bottom to top.
pub fn write_pfm(path: &Path, img: &FloatImage) -> Result<()> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    buf.reserve(img.values.len() * 4);
    for row in (0..img.height).rev() {
        for v in &img.values[row * img.width..(row + 1) * img.width] {
            buf.extend(v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a greyscale PFM of either endianness. Colour PFMs keep their first
/// channel.
pub fn read_pfm(path: &Path) -> Result<FloatImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::format(path, r);
    // Header: three whitespace-separated tokens then a single whitespace byte.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    let channels = match tokens[0] {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("missing Pf/PF magic")),
    };
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let n = width * height;
    if bytes.len() < pos + n * channels * 4 {
        return Err(bad("truncated data"));
    }
    let mut values = vec![0f32; n];
    for row in 0..height {
        for col in 0..width {
            let o = pos + ((row * width + col) * channels) * 4;
            let raw: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
            let v = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            values[(height - 1 - row) * width + col] = v;
        }
    }
    Ok(FloatImage { width, height, values })
}

pub fn write_png8(path: &Path, img: &IntensityImage) -> Result<()> {
    let data = img
        .values()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = GrayImage::from_raw(img.width() as u32, img.height() as u32, data)
        .ok_or_else(|| Error::Dimension("image buffer size".into()))?;
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a PNG as normalized intensities.
pub fn read_png_intensity(path: &Path) -> Result<IntensityImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let g = img.to_luma16();
    let (w, h) = g.dimensions();
    let values = g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    IntensityImage::new(w as usize, h as usize, values)
}

pub fn write_png16_depth(path: &Path, depth: &DepthMap, mm_per_unit: f64) -> Result<()> {
    let data: Vec<u16> = (0..depth.len())
        .map(|i| match depth.get(i) {
            Some((z, _)) => (z / mm_per_unit).round().clamp(1.0, 65535.0) as u16,
            None => 0,
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, data)
            .ok_or_else(|| Error::Dimension("image buffer size".into()))?;
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a 16-bit depth PNG (0 = missing) scaled by `mm_per_unit`. Variances
/// are set to `variance` for every valid pixel.
pub fn read_png16_depth(path: &Path, mm_per_unit: f64, variance: f64) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let depth: Vec<f64> = g.pixels().map(|p| p.0[0] as f64 * mm_per_unit).collect();
    let valid = depth.iter().map(|&z| z > 0.0).collect();
    DepthMap::from_channels(w, h, depth, vec![variance; w * h], Some(valid))
}

/// Depth map from a depth PFM and an optional variance PFM; non-finite or
/// non-positive values mark missing pixels.
pub fn read_depth_pfm(depth: &Path, variance: Option<&Path>, default_variance: f64) -> Result<DepthMap> {
    let d = read_pfm(depth)?;
    let var = match variance {
        Some(p) => {
            let v = read_pfm(p)?;
            if (v.width, v.height) != (d.width, d.height) {
                return Err(Error::Dimension("depth and variance PFMs differ in size".into()));
            }
            v.values.iter().map(|&x| x as f64).collect()
        }
        None => vec![default_variance; d.values.len()],
    };
    DepthMap::from_channels(
        d.width,
        d.height,
        d.values.iter().map(|&x| x as f64).collect(),
        var,
        None,
    )
}

/// Writes depth and variance PFMs; missing pixels are stored as 0.
pub fn write_depth_pfm(depth_path: &Path, variance_path: &Path, map: &DepthMap) -> Result<()> {
    let to_img = |vals: &[f64]| FloatImage {
        width: map.width(),
        height: map.height(),
        values: vals.iter().map(|&v| v as f32).collect(),
    };
    write_pfm(depth_path, &to_img(map.depth()))?;
    write_pfm(variance_path, &to_img(map.variance()))
}
