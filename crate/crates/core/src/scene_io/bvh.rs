//! Binned-SAH bounding volume hierarchy over mesh triangles.

use crate::math::Vec3;
use crate::scene_io::mesh::TriangleMesh;

#[derive(Clone, Copy, Debug)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: Vec3::splat(f64::INFINITY),
        max: Vec3::splat(f64::NEG_INFINITY),
    };

    pub fn grow(&mut self, p: Vec3) {
        self.min = self.min.min(p);
        self.max = self.max.max(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb { min: self.min.min(o.min), max: self.max.max(o.max) }
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        self.min.x <= o.min.x
            && self.min.y <= o.min.y
            && self.min.z <= o.min.z
            && self.max.x >= o.max.x
            && self.max.y >= o.max.y
            && self.max.z >= o.max.z
    }

    pub fn surface_area(&self) -> f64 {
        let d = self.max - self.min;
        if d.x < 0.0 {
            return 0.0;
        }
        2.0 * (d.x * d.y + d.y * d.z + d.z * d.x)
    }

    #[inline]
    fn hit(&self, origin: Vec3, inv_dir: Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for axis in 0..3 {
            let ta = (self.min[axis] - origin[axis]) * inv_dir[axis];
            let tb = (self.max[axis] - origin[axis]) * inv_dir[axis];
            let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
            // NaN-safe: comparisons with NaN leave the bound unchanged.
            if lo > t0 {
                t0 = lo;
            }
            if hi < t1 {
                t1 = hi;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub triangle: usize,
    /// Barycentric weights of the second and third vertex.
    pub b1: f64,
    pub b2: f64,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    bounds: Aabb,
    /// Leaf: first primitive index. Interior: index of the right child (left is `self + 1`).
    offset: u32,
    /// Zero for interior nodes.
    count: u32,
}

#[derive(Clone, Copy, Debug)]
struct PackedTriangle {
    v0: Vec3,
    e1: Vec3,
    e2: Vec3,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    // Reordered triangles and their original indices.
    triangles: Vec<PackedTriangle>,
    indices: Vec<u32>,
}

const LEAF_SIZE: usize = 4;
const BINS: usize = 12;

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Bvh {
        let n = mesh.triangle_count();
        let mut refs: Vec<(Aabb, Vec3, u32)> = (0..n)
            .map(|i| {
                let mut b = Aabb::EMPTY;
                let p = mesh.triangle_positions(i);
                for &v in &p {
                    b.grow(v);
                }
                (b, (p[0] + p[1] + p[2]) / 3.0, i as u32)
            })
            .collect();
        let mut nodes = Vec::with_capacity(2 * n.max(1));
        if n > 0 {
            build_recursive(&mut refs, 0, &mut nodes);
        }
        let indices: Vec<u32> = refs.iter().map(|r| r.2).collect();
        let triangles = indices
            .iter()
            .map(|&i| {
                let [a, b, c] = mesh.triangle_positions(i as usize);
                PackedTriangle { v0: a, e1: b - a, e2: c - a }
            })
            .collect();
        Bvh { nodes, triangles, indices }
    }

    pub fn triangle_count(&self) -> usize {
        self.indices.len()
    }

    /// Closest hit with `t` in (`t_min`, `t_max`).
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut closest = t_max;
        self.traverse(ray, t_max, |bvh, slot| {
            if let Some((t, b1, b2)) = intersect_triangle(&bvh.triangles[slot], ray) {
                if t > t_min && t < closest {
                    closest = t;
                    best = Some(Hit { t, triangle: bvh.indices[slot] as usize, b1, b2 });
                }
            }
            (false, closest)
        });
        best
    }

    /// True iff any triangle intersects the ray in (`t_min`, `t_max`).
    pub fn occluded(&self, ray: &Ray, t_min: f64, t_max: f64) -> bool {
        let mut found = false;
        self.traverse(ray, t_max, |bvh, slot| {
            if let Some((t, _, _)) = intersect_triangle(&bvh.triangles[slot], ray) {
                if t > t_min && t < t_max {
                    found = true;
                }
            }
            (found, t_max)
        });
        found
    }

    /// Visits candidate triangle slots front to back; `visit` returns (stop, current t bound).
    #[inline]
    fn traverse(&self, ray: &Ray, t_max: f64, mut visit: impl FnMut(&Bvh, usize) -> (bool, f64)) {
        if self.nodes.is_empty() {
            return;
        }
        let inv_dir = Vec3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut bound = t_max;
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        let mut node_idx = 0usize;
        loop {
            let node = &self.nodes[node_idx];
            if node.bounds.hit(ray.origin, inv_dir, bound).is_some() {
                if node.count > 0 {
                    for slot in node.offset as usize..(node.offset + node.count) as usize {
                        let (stop, b) = visit(self, slot);
                        if stop {
                            return;
                        }
                        bound = b;
                    }
                } else {
                    let left = node_idx + 1;
                    let right = node.offset as usize;
                    let dl = self.nodes[left].bounds.hit(ray.origin, inv_dir, bound);
                    let dr = self.nodes[right].bounds.hit(ray.origin, inv_dir, bound);
                    match (dl, dr) {
                        (Some(a), Some(b)) => {
                            let (near, far) = if a <= b { (left, right) } else { (right, left) };
                            stack[sp] = far as u32;
                            sp += 1;
                            node_idx = near;
                            continue;
                        }
                        (Some(_), None) => {
                            node_idx = left;
                            continue;
                        }
                        (None, Some(_)) => {
                            node_idx = right;
                            continue;
                        }
                        (None, None) => {}
                    }
                }
            }
            if sp == 0 {
                return;
            }
            sp -= 1;
            node_idx = stack[sp] as usize;
        }
    }

    /// Every triangle appears in exactly one leaf and every node contains its children.
    pub fn check_invariants(&self) -> bool {
        let mut seen = vec![0u32; self.indices.len()];
        let mut ok = true;
        self.check_node(0, &mut seen, &mut ok);
        ok && seen.iter().all(|&c| c == 1)
    }

    fn check_node(&self, idx: usize, seen: &mut [u32], ok: &mut bool) {
        if self.nodes.is_empty() {
            return;
        }
        let node = &self.nodes[idx];
        if node.count > 0 {
            for slot in node.offset..node.offset + node.count {
                seen[self.indices[slot as usize] as usize] += 1;
                let t = &self.triangles[slot as usize];
                let mut b = Aabb::EMPTY;
                for p in [t.v0, t.v0 + t.e1, t.v0 + t.e2] {
                    b.grow(p);
                }
                // Edge vectors reconstruct vertices only up to rounding.
                let slack = Vec3::splat(1e-9 * (1.0 + b.max.max_component().abs()));
                *ok &= Aabb { min: node.bounds.min - slack, max: node.bounds.max + slack }.contains(&b);
            }
        } else {
            for child in [idx + 1, node.offset as usize] {
                *ok &= node.bounds.contains(&self.nodes[child].bounds);
                self.check_node(child, seen, ok);
            }
        }
    }
}

fn build_recursive(refs: &mut [(Aabb, Vec3, u32)], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let mut bounds = Aabb::EMPTY;
    let mut centroid_bounds = Aabb::EMPTY;
    for r in refs.iter() {
        bounds = bounds.union(&r.0);
        centroid_bounds.grow(r.1);
    }
    let idx = nodes.len();
    nodes.push(Node { bounds, offset: offset as u32, count: refs.len() as u32 });
    if refs.len() <= LEAF_SIZE {
        return idx;
    }

    let extent = centroid_bounds.max - centroid_bounds.min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    if extent[axis] <= 0.0 {
        // All centroids coincide; split down the middle of the list.
        let mid = refs.len() / 2;
        return finish_split(refs, mid, offset, idx, nodes);
    }

    let bin_of = |c: Vec3| {
        let f = (c[axis] - centroid_bounds.min[axis]) / extent[axis];
        ((f * BINS as f64) as usize).min(BINS - 1)
    };
    let mut bin_bounds = [Aabb::EMPTY; BINS];
    let mut bin_counts = [0usize; BINS];
    for r in refs.iter() {
        let b = bin_of(r.1);
        bin_bounds[b] = bin_bounds[b].union(&r.0);
        bin_counts[b] += 1;
    }
    let mut best_cost = f64::INFINITY;
    let mut best_split = 1;
    for split in 1..BINS {
        let (mut lb, mut rb) = (Aabb::EMPTY, Aabb::EMPTY);
        let (mut lc, mut rc) = (0usize, 0usize);
        for b in 0..split {
            lb = lb.union(&bin_bounds[b]);
            lc += bin_counts[b];
        }
        for b in split..BINS {
            rb = rb.union(&bin_bounds[b]);
            rc += bin_counts[b];
        }
        if lc == 0 || rc == 0 {
            continue;
        }
        let cost = lb.surface_area() * lc as f64 + rb.surface_area() * rc as f64;
        if cost < best_cost {
            best_cost = cost;
            best_split = split;
        }
    }
    let leaf_cost = bounds.surface_area() * refs.len() as f64;
    if refs.len() <= 2 * LEAF_SIZE && best_cost >= leaf_cost {
        return idx;
    }
    let mut mid = 0;
    for i in 0..refs.len() {
        if bin_of(refs[i].1) < best_split {
            refs.swap(i, mid);
            mid += 1;
        }
    }
    if mid == 0 || mid == refs.len() {
        mid = refs.len() / 2;
    }
    finish_split(refs, mid, offset, idx, nodes)
}

fn finish_split(
    refs: &mut [(Aabb, Vec3, u32)],
    mid: usize,
    offset: usize,
    idx: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let (left, right) = refs.split_at_mut(mid);
    build_recursive(left, offset, nodes);
    let right_idx = build_recursive(right, offset + mid, nodes);
    nodes[idx].offset = right_idx as u32;
    nodes[idx].count = 0;
    idx
}

/// Möller-Trumbore. Degenerate triangles never report a hit.
#[inline]
fn intersect_triangle(tri: &PackedTriangle, ray: &Ray) -> Option<(f64, f64, f64)> {
    let p = ray.dir.cross(tri.e2);
    let det = tri.e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = ray.origin - tri.v0;
    let b1 = s.dot(p) * inv_det;
    if !(0.0..=1.0).contains(&b1) {
        return None;
    }
    let q = s.cross(tri.e1);
    let b2 = ray.dir.dot(q) * inv_det;
    if b2 < 0.0 || b1 + b2 > 1.0 {
        return None;
    }
    let t = tri.e2.dot(q) * inv_det;
    Some((t, b1, b2))
}

/// Reference intersection over every triangle, used to validate the hierarchy.
pub fn brute_force_occluded(mesh: &TriangleMesh, ray: &Ray, t_min: f64, t_max: f64) -> bool {
    (0..mesh.triangle_count()).any(|i| {
        let [a, b, c] = mesh.triangle_positions(i);
        let tri = PackedTriangle { v0: a, e1: b - a, e2: c - a };
        matches!(intersect_triangle(&tri, ray), Some((t, _, _)) if t > t_min && t < t_max)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::mesh::{ground_plane, uv_sphere};

    #[test]
    fn invariants_hold_for_sphere() {
        let bvh = Bvh::build(&uv_sphere(1.0, 24, 48));
        assert!(bvh.check_invariants());
    }

    #[test]
    fn ray_above_plane_pointing_up_is_free() {
        let mesh = ground_plane(1.0);
        let bvh = Bvh::build(&mesh);
        let ray = Ray { origin: Vec3::new(0.1, 1e-4, 0.2), dir: Vec3::Y };
        assert!(!bvh.occluded(&ray, 1e-6, f64::INFINITY));
    }

    #[test]
    fn ray_from_sphere_center_is_blocked() {
        let bvh = Bvh::build(&uv_sphere(1.0, 16, 32));
        let ray = Ray { origin: Vec3::ZERO, dir: Vec3::new(0.3, -0.5, 0.8).normalized() };
        assert!(bvh.occluded(&ray, 1e-6, f64::INFINITY));
        let hit = bvh.intersect(&ray, 1e-6, f64::INFINITY).unwrap();
        assert!((hit.t - 1.0).abs() < 0.02);
    }

    #[test]
    fn degenerate_triangle_is_skipped() {
        let mut mesh = ground_plane(1.0);
        mesh.positions.push(Vec3::new(0.0, 1.0, 0.0));
        mesh.positions.push(Vec3::new(0.0, 1.0, 0.0));
        mesh.positions.push(Vec3::new(0.0, 1.0, 0.0));
        mesh.triangles.push([4, 5, 6]);
        let bvh = Bvh::build(&mesh);
        let ray = Ray { origin: Vec3::new(0.0, 0.5, 0.0), dir: Vec3::Y };
        assert!(!bvh.occluded(&ray, 1e-6, f64::INFINITY));
    }
}
