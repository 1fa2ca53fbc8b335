//! Bounding-volume hierarchy over triangles.
//!
//! Used for closest-point queries while building SDF grids and for ICP
//! correspondences, and for ray casting in the renderer.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 4;
const RAY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    fn dist2(&self, p: &Vec3) -> f64 {
        let d = (self.min - p).sup(&(p - self.max)).sup(&Vec3::zeros());
        d.norm_squared()
    }

    /// Slab test; returns the entry distance when the ray overlaps `[0, t_max]`.
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut lo = (self.min[a] - origin[a]) * inv_dir[a];
            let mut hi = (self.max[a] - origin[a]) * inv_dir[a];
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            // NaN from 0·∞ (ray in the slab plane) must not shrink the interval.
            if lo.is_nan() || hi.is_nan() {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: first primitive index; inner: index of the right child (the
    /// left child immediately follows its parent).
    offset: usize,
    count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub triangle: usize,
    /// Barycentric coordinates of the hit on `v1` and `v2`.
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub point: Vec3,
    pub dist2: f64,
    pub triangle: usize,
}

#[derive(Debug, Clone)]
pub struct TriangleBvh {
    triangles: Vec<[Vec3; 3]>,
    /// `order[i]` is the caller's index of the i-th stored triangle.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl TriangleBvh {
    pub fn new(triangles: Vec<[Vec3; 3]>) -> Self {
        let n = triangles.len();
        let centroids: Vec<Vec3> = triangles.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n.max(1));
        if n > 0 {
            build_node(&triangles, &centroids, &mut order, 0, n, &mut nodes);
        }
        let triangles = order.iter().map(|&i| triangles[i]).collect();
        Self {
            triangles,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Closest intersection with `t` in `(t_min, t_max)`; `dir` need not be unit.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<RayHit> = None;
        let mut t_best = t_max;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if node.bounds.hit(origin, &inv, t_best).is_none() {
                continue;
            }
            if node.count > 0 {
                for i in node.offset..node.offset + node.count {
                    if let Some((t, u, v)) = ray_triangle(origin, dir, &self.triangles[i]) {
                        if t > t_min && t < t_best {
                            t_best = t;
                            best = Some(RayHit {
                                t,
                                triangle: self.order[i],
                                u,
                                v,
                            });
                        }
                    }
                }
            } else {
                stack.push(node.offset);
                stack.push(idx + 1);
            }
        }
        best
    }

    /// Whether anything is hit with `t` in `(t_min, t_max)`.
    pub fn occluded(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if node.bounds.hit(origin, &inv, t_max).is_none() {
                continue;
            }
            if node.count > 0 {
                for tri in &self.triangles[node.offset..node.offset + node.count] {
                    if let Some((t, _, _)) = ray_triangle(origin, dir, tri) {
                        if t > t_min && t < t_max {
                            return true;
                        }
                    }
                }
            } else {
                stack.push(node.offset);
                stack.push(idx + 1);
            }
        }
        false
    }

    /// All ray parameters `t > 0` at which the line crosses a triangle,
    /// unsorted.
    pub fn crossings(&self, origin: &Vec3, dir: &Vec3, out: &mut Vec<f64>) {
        out.clear();
        if self.nodes.is_empty() {
            return;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if node.bounds.hit(origin, &inv, f64::INFINITY).is_none() {
                continue;
            }
            if node.count > 0 {
                for tri in &self.triangles[node.offset..node.offset + node.count] {
                    if let Some((t, _, _)) = ray_triangle(origin, dir, tri) {
                        if t > 0.0 {
                            out.push(t);
                        }
                    }
                }
            } else {
                stack.push(node.offset);
                stack.push(idx + 1);
            }
        }
    }

    /// Closest surface point, searching only within `sqrt(max_dist2)`.
    pub fn closest_point(&self, p: &Vec3, max_dist2: f64) -> Option<ClosestPoint> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<ClosestPoint> = None;
        let mut bound = max_dist2;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if node.bounds.dist2(p) > bound {
                continue;
            }
            if node.count > 0 {
                for i in node.offset..node.offset + node.count {
                    let q = closest_point_on_triangle(p, &self.triangles[i]);
                    let d2 = (q - p).norm_squared();
                    if d2 <= bound {
                        bound = d2;
                        best = Some(ClosestPoint {
                            point: q,
                            dist2: d2,
                            triangle: self.order[i],
                        });
                    }
                }
            } else {
                // Visit the nearer child first so the bound tightens early.
                let left = idx + 1;
                let right = node.offset;
                let dl = self.nodes[left].bounds.dist2(p);
                let dr = self.nodes[right].bounds.dist2(p);
                if dl < dr {
                    stack.push(right);
                    stack.push(left);
                } else {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        best
    }
}

fn build_node(
    triangles: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &i in &order[start..end] {
        for v in &triangles[i] {
            bounds.grow(v);
        }
        cbounds.grow(&centroids[i]);
    }
    let idx = nodes.len();
    nodes.push(Node {
        bounds,
        offset: start,
        count: end - start,
    });
    let extent = cbounds.max - cbounds.min;
    if end - start <= LEAF_SIZE || extent.max() <= 0.0 {
        return idx;
    }
    let axis = extent.imax();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]));
    build_node(triangles, centroids, order, start, mid, nodes);
    let right = build_node(triangles, centroids, order, mid, end, nodes);
    let mut merged = nodes[idx + 1].bounds;
    merged.merge(&nodes[right].bounds);
    nodes[idx] = Node {
        bounds: merged,
        offset: right,
        count: 0,
    };
    idx
}

/// Möller–Trumbore, two-sided. Returns `(t, u, v)`.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    let scale = e1.norm() * e2.norm() * dir.norm();
    if det.abs() <= RAY_EPS * scale {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some((e2.dot(&q) * inv_det, u, v))
}

/// Closest point on a triangle (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, tri: &[Vec3; 3]) -> Vec3 {
    let [a, b, c] = *tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}
