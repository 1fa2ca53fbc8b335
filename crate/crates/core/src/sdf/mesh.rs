//! Triangle meshes: loading, cleaning, watertightness, and a few procedural
//! solids used by the simulator scenes.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

/// Indexed triangle mesh in object coordinates (mm), outward-facing
/// counter-clockwise winding.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// Validates indices and drops zero-area triangles.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex".into()));
        }
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidMesh(format!("triangle {t:?} indexes past {n} vertices")));
        }
        let scale = bounds_of(&vertices)
            .map(|(lo, hi)| (hi - lo).norm())
            .unwrap_or(1.0)
            .max(1e-9);
        let min_area2 = (1e-12 * scale * scale).powi(2);
        let triangles: Vec<[u32; 3]> = triangles
            .into_iter()
            .filter(|t| {
                let [a, b, c] = t.map(|i| vertices[i as usize]);
                t[0] != t[1] && t[1] != t[2] && t[0] != t[2] && (b - a).cross(&(c - a)).norm_squared() > min_area2
            })
            .collect();
        if triangles.is_empty() {
            return Err(Error::InvalidMesh("mesh has no non-degenerate triangles".into()));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        self.triangles[i].map(|k| self.vertices[k as usize])
    }

    pub fn triangle_soup(&self) -> Vec<[Vec3; 3]> {
        (0..self.triangles.len()).map(|i| self.triangle(i)).collect()
    }

    /// Unit face normal (zero-area triangles are removed at construction).
    pub fn face_normal(&self, i: usize) -> Vec3 {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds_of(&self.vertices).expect("mesh has vertices")
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            vertices: pose.transform_cloud(&self.vertices),
            triangles: self.triangles.clone(),
        }
    }

    /// Edges not shared by exactly two triangles, as sorted vertex pairs.
    pub fn open_edges(&self) -> Vec<(u32, u32)> {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut open: Vec<(u32, u32)> = count.into_iter().filter(|&(_, c)| c != 2).map(|(e, _)| e).collect();
        open.sort_unstable();
        open
    }

    pub fn check_watertight(&self) -> Result<()> {
        let open = self.open_edges();
        if open.is_empty() {
            Ok(())
        } else {
            Err(Error::NotWatertight {
                count: open.len(),
                sample: open.into_iter().take(8).collect(),
            })
        }
    }

    /// Area-weighted uniform surface samples with their face normals.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<(Vec3, Vec3)> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(i);
            acc += 0.5 * (b - a).cross(&(c - a)).norm();
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let x = rng.random::<f64>() * acc;
                let i = cdf.partition_point(|&c| c < x).min(cdf.len() - 1);
                let [a, b, c] = self.triangle(i);
                let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                (a + (b - a) * r1 + (c - a) * r2, self.face_normal(i))
            })
            .collect()
    }

    /// Loads `.obj` or `.stl` (ASCII or binary), triangles only.
    pub fn load(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        match ext.as_deref() {
            Some("obj") => {
                let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "OBJ file is not UTF-8"))?;
                parse_obj(&text).map_err(|r| Error::format(path, r))
            }
            Some("stl") => parse_stl(&bytes).map_err(|r| Error::format(path, r)),
            _ => Err(Error::format(path, "unsupported mesh extension (want .obj or .stl)")),
        }
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Stable 64-bit fingerprint of the geometry (FNV-1a over the raw bits).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for v in &self.vertices {
            for x in v.iter() {
                h.write(&x.to_le_bytes());
            }
        }
        for t in &self.triangles {
            for i in t {
                h.write(&i.to_le_bytes());
            }
        }
        h.0
    }

    /// Icosphere centred at the origin.
    pub fn icosphere(radius: f64, subdivisions: u32) -> Self {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            (-1.0, phi, 0.0),
            (1.0, phi, 0.0),
            (-1.0, -phi, 0.0),
            (1.0, -phi, 0.0),
            (0.0, -1.0, phi),
            (0.0, 1.0, phi),
            (0.0, -1.0, -phi),
            (0.0, 1.0, -phi),
            (phi, 0.0, -1.0),
            (phi, 0.0, 1.0),
            (-phi, 0.0, -1.0),
            (-phi, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
            let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let m = ((vertices[a as usize] + vertices[b as usize]) * 0.5).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        let vertices = vertices.into_iter().map(|v| v * radius).collect();
        Self::new(vertices, faces).expect("icosphere is valid")
    }

    /// Axis-aligned box centred at the origin.
    pub fn cuboid(size: Vec3) -> Self {
        let h = size * 0.5;
        let vertices = (0..8)
            .map(|i| {
                Vec3::new(
                    if i & 1 == 0 { -h.x } else { h.x },
                    if i & 2 == 0 { -h.y } else { h.y },
                    if i & 4 == 0 { -h.z } else { h.z },
                )
            })
            .collect();
        let faces = vec![
            [0, 2, 3],
            [0, 3, 1],
            [4, 5, 7],
            [4, 7, 6],
            [0, 1, 5],
            [0, 5, 4],
            [2, 6, 7],
            [2, 7, 3],
            [0, 4, 6],
            [0, 6, 2],
            [1, 3, 7],
            [1, 7, 5],
        ];
        Self::new(vertices, faces).expect("cuboid is valid")
    }

    /// Prism from a simple polygon in the xy-plane (either winding),
    /// extruded symmetrically along z by `depth`.
    pub fn extrude(polygon: &[[f64; 2]], depth: f64) -> Result<Self> {
        let n = polygon.len();
        if n < 3 || !(depth > 0.0) {
            return Err(Error::InvalidMesh("extrusion needs ≥ 3 points and depth > 0".into()));
        }
        let mut poly: Vec<[f64; 2]> = polygon.to_vec();
        if signed_area(&poly) < 0.0 {
            poly.reverse();
        }
        let caps = ear_clip(&poly)?;
        let hz = depth * 0.5;
        let mut vertices: Vec<Vec3> = poly.iter().map(|p| Vec3::new(p[0], p[1], -hz)).collect();
        vertices.extend(poly.iter().map(|p| Vec3::new(p[0], p[1], hz)));
        let n32 = n as u32;
        let mut faces = Vec::with_capacity(2 * caps.len() + 2 * n);
        for [a, b, c] in &caps {
            faces.push([*a, *c, *b]);
            faces.push([a + n32, b + n32, c + n32]);
        }
        for i in 0..n32 {
            let j = (i + 1) % n32;
            faces.push([i, j, j + n32]);
            faces.push([i, j + n32, i + n32]);
        }
        Self::new(vertices, faces)
    }

    /// Asymmetric L-shaped bracket (no rotational symmetry), roughly
    /// 60 × 40 × 30 mm, centred near its centroid.
    pub fn l_bracket() -> Self {
        let poly = [
            [0.0, 0.0],
            [60.0, 0.0],
            [60.0, 12.0],
            [16.0, 12.0],
            [16.0, 40.0],
            [0.0, 40.0],
        ];
        let centred: Vec<[f64; 2]> = poly.iter().map(|p| [p[0] - 22.0, p[1] - 13.0]).collect();
        Self::extrude(&centred, 30.0).expect("bracket polygon is simple")
    }

    /// Block with a 90° V-groove cut into its +z face. The V cross-section
    /// lies in the xz-plane and the groove runs along y.
    pub fn v_groove(width: f64, height: f64, groove_depth: f64, length: f64) -> Self {
        let hw = width * 0.5;
        let poly = [
            [-hw, 0.0],
            [hw, 0.0],
            [hw, height],
            [groove_depth, height],
            [0.0, height - groove_depth],
            [-groove_depth, height],
            [-hw, height],
        ];
        // Extrude along z, then rotate so the profile stands in xz and the
        // groove opens towards +z.
        let prism = Self::extrude(&poly, length).expect("groove polygon is simple");
        let to_xz = Pose::from_axis_angle(
            Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0),
            Vec3::new(0.0, 0.0, -height * 0.5),
        );
        prism.transformed(&to_xz)
    }

    /// Zig-zag strip: a folded plate with several concave folds, the
    /// inter-reflection-prone part used in the glossy benchmarks.
    pub fn zigzag() -> Self {
        let (teeth, pitch, amp, thick) = (3, 20.0, 14.0, 6.0);
        let mut top = Vec::new();
        let mut bottom = Vec::new();
        for i in 0..=2 * teeth {
            let x = i as f64 * pitch * 0.5;
            let y = if i % 2 == 0 { 0.0 } else { amp };
            top.push([x, y + thick]);
            bottom.push([x, y]);
        }
        // Make the two ends asymmetric so no rigid motion maps the part onto
        // itself.
        top.last_mut().unwrap()[1] += 6.0;
        let mut poly: Vec<[f64; 2]> = bottom;
        poly.extend(top.into_iter().rev());
        let cx = teeth as f64 * pitch * 0.5;
        let centred: Vec<[f64; 2]> = poly.iter().map(|p| [p[0] - cx, p[1] - amp * 0.5]).collect();
        Self::extrude(&centred, 24.0).expect("zigzag polygon is simple")
    }

    /// Thick block with an off-centre 90° V-channel and a stepped corner,
    /// 64 × 36 mm in profile and 40 mm long. The channel is the
    /// inter-reflection trap; every wall is at least 16 mm thick.
    pub fn grooved_block() -> Self {
        let poly = [
            [-32.0, 0.0],
            [32.0, 0.0],
            [32.0, 36.0],
            [24.0, 36.0],
            [8.0, 20.0],
            [-8.0, 36.0],
            [-16.0, 36.0],
            [-16.0, 24.0],
            [-32.0, 24.0],
        ];
        let centred: Vec<[f64; 2]> = poly.iter().map(|p| [p[0], p[1] - 16.0]).collect();
        Self::extrude(&centred, 40.0).expect("grooved block polygon is simple")
    }
}

fn bounds_of(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = points.first()?;
    Some(
        points
            .iter()
            .fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
    )
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

/// Ear clipping for a simple counter-clockwise polygon.
fn ear_clip(poly: &[[f64; 2]]) -> Result<Vec<[u32; 3]>> {
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut out = Vec::with_capacity(poly.len() - 2);
    while idx.len() > 3 {
        let m = idx.len();
        let ear = (0..m).find(|&k| {
            let (ia, ib, ic) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            let (a, b, c) = (poly[ia], poly[ib], poly[ic]);
            if cross(a, b, c) <= 0.0 {
                return false;
            }
            idx.iter().all(|&j| {
                if j == ia || j == ib || j == ic {
                    return true;
                }
                let p = poly[j];
                !(cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0)
            })
        });
        let Some(k) = ear else {
            return Err(Error::InvalidMesh("polygon is not simple".into()));
        };
        let m = idx.len();
        out.push([idx[(k + m - 1) % m] as u32, idx[k] as u32, idx[(k + 1) % m] as u32]);
        idx.remove(k);
    }
    out.push([idx[0] as u32, idx[1] as u32, idx[2] as u32]);
    Ok(out)
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

fn parse_obj(text: &str) -> std::result::Result<TriangleMesh, String> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xyz: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("line {}: {e}", lineno + 1))?;
                if xyz.len() != 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", lineno + 1));
                }
                vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|e| format!("line {}: {e}", lineno + 1))?;
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        u32::try_from(resolved).map_err(|_| format!("line {}: bad index {i}", lineno + 1))
                    })
                    .collect::<std::result::Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(format!("line {}: only triangles are supported", lineno + 1));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces).map_err(|e| e.to_string())
}

fn parse_stl(bytes: &[u8]) -> std::result::Result<TriangleMesh, String> {
    let is_ascii = bytes.starts_with(b"solid") && std::str::from_utf8(bytes).is_ok_and(|s| s.contains("facet"));
    let mut corners: Vec<[f32; 3]> = Vec::new();
    if is_ascii {
        let text = std::str::from_utf8(bytes).unwrap();
        for line in text.lines() {
            let mut it = line.split_whitespace();
            if it.next() == Some("vertex") {
                let xyz: Vec<f32> = it
                    .take(3)
                    .map(|s| s.parse::<f32>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?;
                if xyz.len() != 3 {
                    return Err("vertex needs 3 coordinates".into());
                }
                corners.push([xyz[0], xyz[1], xyz[2]]);
            }
        }
    } else {
        if bytes.len() < 84 {
            return Err("binary STL shorter than its header".into());
        }
        let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        if bytes.len() < 84 + n * 50 {
            return Err(format!("binary STL truncated: expected {n} facets"));
        }
        for f in 0..n {
            let base = 84 + f * 50 + 12;
            for k in 0..3 {
                let mut v = [0f32; 3];
                for (a, slot) in v.iter_mut().enumerate() {
                    let o = base + k * 12 + a * 4;
                    *slot = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
                }
                corners.push(v);
            }
        }
    }
    if !corners.len().is_multiple_of(3) {
        return Err("facet with fewer than 3 vertices".into());
    }
    // STL stores triangle soup; weld exact duplicates so edges are shared.
    let mut lookup: HashMap<[u32; 3], u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::with_capacity(corners.len() / 3);
    for tri in corners.chunks(3) {
        let mut ids = [0u32; 3];
        for (k, c) in tri.iter().enumerate() {
            let key = c.map(f32::to_bits);
            ids[k] = *lookup.entry(key).or_insert_with(|| {
                vertices.push(Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64));
                (vertices.len() - 1) as u32
            });
        }
        faces.push(ids);
    }
    TriangleMesh::new(vertices, faces).map_err(|e| e.to_string())
}
