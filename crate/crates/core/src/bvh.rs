//! Bounding volume hierarchy over mesh triangles for ray casting and
//! nearest-surface queries.

use nalgebra::Vector3;

use crate::mesh::{closest_point_on_triangle, TriangleMesh};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    /// Slab test; returns the entry distance when the box is hit before `t_max`.
    #[inline]
    fn hit(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let a = (self.min[k] - origin[k]) * inv_dir[k];
            let b = (self.max[k] - origin[k]) * inv_dir[k];
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            // NaN from 0 * inf leaves the bounds unchanged
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }

    #[inline]
    fn distance_squared(&self, p: &Vector3<f64>) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: first index into `order`; interior: index of the left child (right is `left + 1`).
    start: u32,
    count: u32,
}

/// Ray hit: distance along the (unit) ray, triangle index, and barycentrics of vertices 1 and 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub triangle: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    tris: Vec<[Vector3<f64>; 3]>,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Bvh {
        let tris: Vec<[Vector3<f64>; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        let centroids: Vec<Vector3<f64>> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        nodes.push(Node {
            bounds: Aabb::empty(),
            start: 0,
            count: tris.len() as u32,
        });
        if !tris.is_empty() {
            Self::split(0, 0, tris.len(), &tris, &centroids, &mut order, &mut nodes);
        }
        Bvh { nodes, order, tris }
    }

    #[allow(clippy::too_many_arguments)]
    fn split(
        node: usize,
        start: usize,
        end: usize,
        tris: &[[Vector3<f64>; 3]],
        centroids: &[Vector3<f64>],
        order: &mut [u32],
        nodes: &mut Vec<Node>,
    ) {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &i in &order[start..end] {
            for p in &tris[i as usize] {
                bounds.grow(p);
            }
            cbounds.grow(&centroids[i as usize]);
        }
        nodes[node].bounds = bounds;
        let count = end - start;
        let extent = cbounds.max - cbounds.min;
        let axis = extent.imax();
        if count <= LEAF_SIZE || extent[axis] <= 0.0 {
            nodes[node].start = start as u32;
            nodes[node].count = count as u32;
            return;
        }
        let mid = start + count / 2;
        order[start..end].select_nth_unstable_by(count / 2, |&a, &b| {
            centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis])
        });
        let left = nodes.len();
        let placeholder = Node {
            bounds: Aabb::empty(),
            start: 0,
            count: 0,
        };
        nodes.push(placeholder.clone());
        nodes.push(placeholder);
        nodes[node].start = left as u32;
        nodes[node].count = 0;
        Self::split(left, start, mid, tris, centroids, order, nodes);
        Self::split(left + 1, mid, end, tris, centroids, order, nodes);
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Nearest intersection along a unit-length ray (two-sided, Möller–Trumbore).
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        if self.tris.is_empty() {
            return None;
        }
        let inv_dir = dir.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut t_best = f64::INFINITY;
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.bounds.hit(origin, &inv_dir, t_best).is_none() {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for &ti in &self.order[s..s + node.count as usize] {
                    if let Some((t, u, v)) = ray_triangle(origin, dir, &self.tris[ti as usize]) {
                        if t < t_best {
                            t_best = t;
                            best = Some(Hit {
                                distance: t,
                                triangle: ti as usize,
                                u,
                                v,
                            });
                        }
                    }
                }
            } else {
                let l = node.start;
                let r = l + 1;
                let dl = self.nodes[l as usize].bounds.hit(origin, &inv_dir, t_best);
                let dr = self.nodes[r as usize].bounds.hit(origin, &inv_dir, t_best);
                match (dl, dr) {
                    (Some(a), Some(b)) => {
                        // visit the nearer child first
                        if a <= b {
                            stack.push(r);
                            stack.push(l);
                        } else {
                            stack.push(l);
                            stack.push(r);
                        }
                    }
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        best
    }

    /// Closest surface point to `p` and its distance.
    pub fn closest_point(&self, p: &Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
        if self.tris.is_empty() {
            return None;
        }
        let mut best_d2 = f64::INFINITY;
        let mut best = *p;
        let mut stack: Vec<u32> = vec![0];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.bounds.distance_squared(p) >= best_d2 {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for &ti in &self.order[s..s + node.count as usize] {
                    let [a, b, c] = &self.tris[ti as usize];
                    let q = closest_point_on_triangle(p, a, b, c);
                    let d2 = (q - p).norm_squared();
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best = q;
                    }
                }
            } else {
                let l = node.start;
                let r = l + 1;
                let dl = self.nodes[l as usize].bounds.distance_squared(p);
                let dr = self.nodes[r as usize].bounds.distance_squared(p);
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        Some((best, best_d2.sqrt()))
    }
}

/// Möller–Trumbore ray/triangle test, accepting both faces.
#[inline]
pub fn ray_triangle(origin: &Vector3<f64>, dir: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    // small slack so rays through shared edges hit one of the neighbours
    const EDGE: f64 = 1e-12;
    if !(-EDGE..=1.0 + EDGE).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -EDGE || u + v > 1.0 + EDGE {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-9).then_some((t, u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute_intersect(mesh: &TriangleMesh, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        (0..mesh.triangles.len())
            .filter_map(|t| ray_triangle(o, d, &mesh.triangle(t)).map(|h| h.0))
            .min_by(f64::total_cmp)
    }

    fn bumpy_mesh() -> TriangleMesh {
        let mut m = TriangleMesh::plane_grid(20.0, 30.0, 24);
        for v in &mut m.vertices {
            v.z += 3.0 * (v.x * 0.3).sin() * (v.y * 0.2).cos();
        }
        m.recompute_normals();
        m
    }

    #[test]
    fn ray_matches_brute_force() {
        let mesh = bumpy_mesh();
        let bvh = Bvh::build(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let o = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0);
            let d = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0).normalize();
            let a = bvh.intersect(&o, &d).map(|h| h.distance);
            let b = brute_intersect(&mesh, &o, &d);
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn closest_point_matches_brute_force() {
        let mesh = bumpy_mesh();
        let bvh = Bvh::build(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.random_range(-25.0..25.0),
                rng.random_range(-25.0..25.0),
                rng.random_range(20.0..40.0),
            );
            let (_, d) = bvh.closest_point(&p).unwrap();
            let brute = (0..mesh.triangles.len())
                .map(|t| {
                    let [a, b, c] = mesh.triangle(t);
                    (closest_point_on_triangle(&p, &a, &b, &c) - p).norm()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((d - brute).abs() < 1e-12);
        }
    }
}
