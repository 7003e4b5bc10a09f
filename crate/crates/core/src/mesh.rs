//! Indexed triangle meshes with per-vertex normals and gray albedo.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Vec<Vector3<f64>>,
    pub albedo: Vec<f64>,
}

/// Edge incidence summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeStats {
    pub interior: usize,
    pub boundary: usize,
    pub non_manifold: usize,
}

impl TriangleMesh {
    /// Builds a mesh and derives area-weighted vertex normals from the winding.
    pub fn from_geometry(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>, albedo: f64) -> Result<Self> {
        let n = vertices.len();
        let mut mesh = TriangleMesh {
            normals: vec![Vector3::zeros(); n],
            albedo: vec![albedo; n],
            vertices,
            triangles,
        };
        mesh.check_indices()?;
        mesh.recompute_normals();
        Ok(mesh)
    }

    /// Square grid on the plane `z = depth`, facing `-z`, with `cells` subdivisions per side.
    pub fn plane_grid(half_extent: f64, depth: f64, cells: usize) -> TriangleMesh {
        let side = cells + 1;
        let step = 2.0 * half_extent / cells as f64;
        let mut vertices = Vec::with_capacity(side * side);
        for j in 0..side {
            for i in 0..side {
                vertices.push(Vector3::new(-half_extent + i as f64 * step, -half_extent + j as f64 * step, depth));
            }
        }
        let mut triangles = Vec::with_capacity(2 * cells * cells);
        for j in 0..cells {
            for i in 0..cells {
                let a = (j * side + i) as u32;
                let b = a + 1;
                let c = a + side as u32;
                let d = c + 1;
                // wound so that normals point towards -z
                triangles.push([a, c, b]);
                triangles.push([b, c, d]);
            }
        }
        TriangleMesh::from_geometry(vertices, triangles, 0.5).expect("grid indices are in range")
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    fn check_indices(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().position(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::invalid("mesh", format!("triangle {t} references a missing vertex")));
        }
        Ok(())
    }

    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for tri in &self.triangles {
            let [a, b, c] = tri.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in tri {
                acc[i as usize] += n;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| n.try_normalize(1e-300).unwrap_or_else(Vector3::z))
            .collect();
    }

    pub fn validate(&self) -> Result<()> {
        self.check_indices()?;
        let n = self.vertices.len();
        if self.normals.len() != n || self.albedo.len() != n {
            return Err(Error::invalid("mesh", "attribute arrays differ in length from vertices"));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("mesh", "non-finite vertex"));
        }
        if self.normals.iter().any(|nrm| (nrm.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::invalid("mesh", "normal not unit length"));
        }
        Ok(())
    }

    pub fn edge_stats(&self) -> EdgeStats {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut stats = EdgeStats {
            interior: 0,
            boundary: 0,
            non_manifold: 0,
        };
        for &c in counts.values() {
            match c {
                1 => stats.boundary += 1,
                2 => stats.interior += 1,
                _ => stats.non_manifold += 1,
            }
        }
        stats
    }

    /// Sorted, deduplicated 1-ring neighbours of every vertex.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nbrs: Vec<Vec<u32>> = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                nbrs[a as usize].push(b);
                nbrs[b as usize].push(a);
            }
        }
        for n in &mut nbrs {
            n.sort_unstable();
            n.dedup();
        }
        nbrs
    }

    /// Interpolated albedo at barycentric coordinates of a triangle.
    #[inline]
    pub fn albedo_at(&self, t: usize, u: f64, v: f64) -> f64 {
        let [a, b, c] = self.triangles[t];
        (1.0 - u - v) * self.albedo[a as usize] + u * self.albedo[b as usize] + v * self.albedo[c as usize]
    }

    /// Interpolated, renormalized shading normal.
    #[inline]
    pub fn normal_at(&self, t: usize, u: f64, v: f64) -> Vector3<f64> {
        let [a, b, c] = self.triangles[t];
        let n = (1.0 - u - v) * self.normals[a as usize] + u * self.normals[b as usize] + v * self.normals[c as usize];
        n.try_normalize(1e-300).unwrap_or(self.normals[a as usize])
    }
}

/// Closest point to `p` on triangle `(a, b, c)` (Ericson, region classification).
pub fn closest_point_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_grid_faces_negative_z() {
        let m = TriangleMesh::plane_grid(10.0, 50.0, 4);
        assert_eq!(m.vertex_count(), 25);
        assert_eq!(m.triangles.len(), 32);
        for n in &m.normals {
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        }
        let e = m.edge_stats();
        assert_eq!(e.boundary, 16);
        assert_eq!(e.non_manifold, 0);
        m.validate().unwrap();
    }

    #[test]
    fn out_of_range_index_rejected() {
        let v = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
        assert!(TriangleMesh::from_geometry(v, vec![[0, 1, 3]], 0.5).is_err());
    }

    #[test]
    fn closest_point_regions() {
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(1.0, 0.0, 0.0);
        let c = Vector3::new(0.0, 1.0, 0.0);
        let inside = closest_point_on_triangle(&Vector3::new(0.25, 0.25, 3.0), &a, &b, &c);
        assert!((inside - Vector3::new(0.25, 0.25, 0.0)).norm() < 1e-15);
        let vertex = closest_point_on_triangle(&Vector3::new(-1.0, -1.0, 0.0), &a, &b, &c);
        assert_eq!(vertex, a);
        let edge = closest_point_on_triangle(&Vector3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((edge - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }
}
