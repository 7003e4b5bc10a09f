//! Procedural colon-segment phantom: a tube swept along a smooth centerline,
//! indented by haustral folds, carrying sessile polyps and a painted mucosa
//! texture.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpd::PointSet;
use crate::error::{Error, Result};
use crate::matching::{CandidatePatch, FOLD_LABEL};
use crate::mesh::TriangleMesh;

/// Minimum number of vertices in a candidate patch.
pub const MIN_PATCH_POINTS: usize = 50;

const CENTERLINE_STEP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolypSpec {
    /// Position along the centerline as a fraction of the segment length.
    pub center_param: f64,
    /// Radians, measured from the centerline frame's first normal.
    pub azimuth: f64,
    /// Base diameter in mm.
    pub diameter: f64,
    /// Protrusion in mm; defaults to half the diameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

impl PolypSpec {
    pub fn height(&self) -> f64 {
        self.height.unwrap_or(self.diameter / 2.0)
    }

    /// `"polyp-<diameter>"`, e.g. `polyp-15`.
    pub fn label(&self) -> String {
        polyp_label(self.diameter)
    }
}

pub fn polyp_label(diameter: f64) -> String {
    if (diameter - diameter.round()).abs() < 1e-9 {
        format!("polyp-{}", diameter.round() as i64)
    } else {
        format!("polyp-{diameter}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub segment_length: f64,
    pub lumen_radius: f64,
    /// Control points of a Catmull-Rom centerline, in mm. Its arc length must
    /// be at least `segment_length`; the tube covers the first `segment_length` mm.
    pub centerline: Vec<[f64; 3]>,
    pub fold_count: usize,
    pub fold_depth: f64,
    pub polyps: Vec<PolypSpec>,
    pub texture_seed: u64,
    /// Seeds the jitter of the fold crest positions.
    pub rng_seed: u64,
    /// Target mesh edge length in mm.
    pub resolution: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            segment_length: 250.0,
            lumen_radius: 22.0,
            centerline: vec![[0.0, 0.0, 0.0], [0.0, 0.0, 90.0], [0.0, 10.0, 180.0], [0.0, 25.0, 265.0]],
            fold_count: 12,
            fold_depth: 6.0,
            polyps: vec![
                PolypSpec {
                    center_param: 0.25,
                    azimuth: 0.9,
                    diameter: 8.0,
                    height: None,
                },
                PolypSpec {
                    center_param: 7.0 / 12.0,
                    azimuth: 0.0,
                    diameter: 15.0,
                    height: None,
                },
            ],
            texture_seed: 1,
            rng_seed: 0,
            resolution: 0.6,
        }
    }
}

impl PhantomSpec {
    /// A straight tube along +z with no folds or polyps.
    pub fn plain_tube(length: f64, radius: f64) -> Self {
        PhantomSpec {
            segment_length: length,
            lumen_radius: radius,
            centerline: vec![[0.0, 0.0, 0.0], [0.0, 0.0, length]],
            fold_count: 0,
            fold_depth: 0.0,
            polyps: Vec::new(),
            ..PhantomSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("phantom spec", r));
        if !(self.segment_length > 0.0) {
            return bad("segment_length must be positive");
        }
        if !(self.fold_depth >= 0.0 && self.lumen_radius > self.fold_depth) {
            return bad("need lumen_radius > fold_depth >= 0");
        }
        if !(self.resolution > 0.0) {
            return bad("resolution must be positive");
        }
        if self.centerline.len() < 2 {
            return bad("centerline needs at least two control points");
        }
        for (i, p) in self.polyps.iter().enumerate() {
            if !(p.diameter > 0.0 && p.diameter < self.lumen_radius) {
                return Err(Error::invalid("phantom spec", format!("polyp {i}: diameter must be in (0, lumen_radius)")));
            }
            let h = p.height();
            if !(h >= 0.0 && h + self.fold_depth < self.lumen_radius) {
                return Err(Error::invalid("phantom spec", format!("polyp {i}: height out of range")));
            }
            let s = p.center_param * self.segment_length;
            if !(p.center_param.is_finite() && s - p.diameter / 2.0 >= 0.0 && s + p.diameter / 2.0 <= self.segment_length) {
                return Err(Error::invalid("phantom spec", format!("polyp {i}: support leaves the segment")));
            }
        }
        for i in 0..self.polyps.len() {
            for j in i + 1..self.polyps.len() {
                let (a, b) = (&self.polyps[i], &self.polyps[j]);
                let ds = (a.center_param - b.center_param) * self.segment_length;
                let da = wrap_angle(a.azimuth - b.azimuth) * self.lumen_radius;
                if ds.hypot(da) < (a.diameter + b.diameter) / 2.0 {
                    return Err(Error::PolypOverlap(i, j));
                }
            }
        }
        Ok(())
    }

    fn fold_crest_fractions(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        (0..self.fold_count).map(|_| 0.5 + rng.random_range(-0.1..0.1)).collect()
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Arc-length parameterized centerline with parallel-transported frames.
#[derive(Debug, Clone)]
pub struct Centerline {
    step: f64,
    positions: Vec<Vector3<f64>>,
    tangents: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
}

/// Orthonormal frame along the centerline; `normal × binormal = tangent`.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub origin: Vector3<f64>,
    pub tangent: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub binormal: Vector3<f64>,
}

impl Frame {
    /// Outward radial direction at azimuth `a`.
    pub fn radial(&self, a: f64) -> Vector3<f64> {
        self.normal * a.cos() + self.binormal * a.sin()
    }
}

fn catmull_rom(p0: &Vector3<f64>, p1: &Vector3<f64>, p2: &Vector3<f64>, p3: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * ((2.0 * p1) + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3)
}

fn transport(prev_normal: &Vector3<f64>, tangent: &Vector3<f64>) -> Vector3<f64> {
    (prev_normal - tangent * prev_normal.dot(tangent)).normalize()
}

impl Centerline {
    pub fn new(control: &[[f64; 3]], length: f64) -> Result<Self> {
        let pts: Vec<Vector3<f64>> = control.iter().map(|p| Vector3::from(*p)).collect();
        let n = pts.len();
        if n < 2 {
            return Err(Error::invalid("centerline", "needs at least two control points"));
        }
        let ext = |i: isize| -> Vector3<f64> {
            if i < 0 {
                2.0 * pts[0] - pts[1]
            } else if i as usize >= n {
                2.0 * pts[n - 1] - pts[n - 2]
            } else {
                pts[i as usize]
            }
        };
        // dense polyline through the spline
        const SUB: usize = 400;
        let mut dense = vec![pts[0]];
        for seg in 0..n - 1 {
            let i = seg as isize;
            let (p0, p1, p2, p3) = (ext(i - 1), ext(i), ext(i + 1), ext(i + 2));
            for k in 1..=SUB {
                dense.push(catmull_rom(&p0, &p1, &p2, &p3, k as f64 / SUB as f64));
            }
        }
        let mut cum = vec![0.0];
        for w in dense.windows(2) {
            let l = (w[1] - w[0]).norm();
            cum.push(cum.last().unwrap() + l);
        }
        let total = *cum.last().unwrap();
        if total + 1e-9 < length {
            return Err(Error::invalid(
                "centerline",
                format!("arc length {total:.3} mm is shorter than segment length {length} mm"),
            ));
        }
        let samples = (length / CENTERLINE_STEP).ceil() as usize + 2;
        let mut positions = Vec::with_capacity(samples);
        let mut j = 0;
        for k in 0..samples {
            let s = (k as f64 * CENTERLINE_STEP).min(total);
            while j + 1 < cum.len() - 1 && cum[j + 1] < s {
                j += 1;
            }
            let seg = cum[j + 1] - cum[j];
            let f = if seg > 0.0 { ((s - cum[j]) / seg).clamp(0.0, 1.0) } else { 0.0 };
            positions.push(dense[j] + (dense[j + 1] - dense[j]) * f);
        }
        let mut tangents: Vec<Vector3<f64>> = Vec::with_capacity(samples);
        for k in 0..samples {
            let a = positions[k.saturating_sub(1)];
            let b = positions[(k + 1).min(samples - 1)];
            // samples clamped to the end of the spline repeat the last tangent
            match (b - a).try_normalize(1e-12) {
                Some(t) => tangents.push(t),
                None => tangents.push(tangents.last().copied().unwrap_or_else(Vector3::z)),
            }
        }
        let t0 = tangents[0];
        let seed_axis = if t0.x.abs() <= t0.y.abs() && t0.x.abs() <= t0.z.abs() {
            Vector3::x()
        } else if t0.y.abs() <= t0.z.abs() {
            Vector3::y()
        } else {
            Vector3::z()
        };
        let mut normals = Vec::with_capacity(samples);
        normals.push(transport(&seed_axis, &t0));
        for k in 1..samples {
            let prev = normals[k - 1];
            normals.push(transport(&prev, &tangents[k]));
        }
        Ok(Centerline {
            step: CENTERLINE_STEP,
            positions,
            tangents,
            normals,
        })
    }

    pub fn frame(&self, s: f64) -> Frame {
        let last = self.positions.len() - 1;
        let x = (s / self.step).clamp(0.0, last as f64);
        let k = (x.floor() as usize).min(last - 1);
        let f = x - k as f64;
        let origin = self.positions[k] + (self.positions[k + 1] - self.positions[k]) * f;
        let tangent = (self.tangents[k] * (1.0 - f) + self.tangents[k + 1] * f).normalize();
        let normal = transport(&self.normals[k], &tangent);
        let binormal = tangent.cross(&normal);
        Frame {
            origin,
            tangent,
            normal,
            binormal,
        }
    }

    /// Arc-length position of the centerline sample closest to `p`.
    pub fn closest_position(&self, p: &Vector3<f64>) -> f64 {
        let k = self
            .positions
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (c - p).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        k as f64 * self.step
    }
}

/// Analytic description of the phantom surface `r(s, a)` around its centerline.
#[derive(Debug, Clone)]
pub struct PhantomSurface {
    spec: PhantomSpec,
    centerline: Centerline,
    crest_fractions: Vec<f64>,
}

/// Location and orientation of a polyp apex on the phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolypSite {
    pub index: usize,
    pub label: String,
    pub arc_position: f64,
    pub azimuth: f64,
    pub diameter: f64,
    pub height: f64,
    pub apex: Vector3<f64>,
    /// Unit surface normal at the apex, pointing into the lumen.
    pub inward_normal: Vector3<f64>,
    /// Centerline tangent at the polyp.
    pub axis: Vector3<f64>,
}

impl PhantomSurface {
    pub fn new(spec: &PhantomSpec) -> Result<Self> {
        spec.validate()?;
        Ok(PhantomSurface {
            centerline: Centerline::new(&spec.centerline, spec.segment_length)?,
            crest_fractions: spec.fold_crest_fractions(),
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    pub fn centerline(&self) -> &Centerline {
        &self.centerline
    }

    /// Radial indentation of the haustral folds at arc position `s`.
    pub fn fold_offset(&self, s: f64) -> f64 {
        let n = self.spec.fold_count;
        if n == 0 || self.spec.fold_depth == 0.0 {
            return 0.0;
        }
        let period = self.spec.segment_length / n as f64;
        let k = ((s / period).floor().max(0.0) as usize).min(n - 1);
        let u = ((s - k as f64 * period) / period).clamp(0.0, 1.0);
        let f = self.crest_fractions[k];
        let phase = if u < f { PI * u / f } else { PI + PI * (u - f) / (1.0 - f) };
        self.spec.fold_depth * 0.5 * (1.0 - phase.cos())
    }

    /// Fold-surface radius (without polyps).
    pub fn fold_radius(&self, s: f64) -> f64 {
        self.spec.lumen_radius - self.fold_offset(s)
    }

    /// Inward displacement contributed by the polyps at `(s, a)`.
    pub fn polyp_offset(&self, s: f64, a: f64) -> f64 {
        self.spec
            .polyps
            .iter()
            .map(|p| {
                let sc = p.center_param * self.spec.segment_length;
                let base = self.fold_radius(sc);
                let d = (s - sc).hypot(base * wrap_angle(a - p.azimuth));
                if d < p.diameter / 2.0 {
                    let c = (PI * d / p.diameter).cos();
                    p.height() * c * c
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn radius(&self, s: f64, a: f64) -> f64 {
        self.fold_radius(s) - self.polyp_offset(s, a)
    }

    pub fn point(&self, s: f64, a: f64) -> Vector3<f64> {
        let f = self.centerline.frame(s);
        f.origin + f.radial(a) * self.radius(s, a)
    }

    pub fn polyp_sites(&self) -> Vec<PolypSite> {
        self.spec
            .polyps
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let s = p.center_param * self.spec.segment_length;
                let f = self.centerline.frame(s);
                PolypSite {
                    index,
                    label: p.label(),
                    arc_position: s,
                    azimuth: p.azimuth,
                    diameter: p.diameter,
                    height: p.height(),
                    apex: self.point(s, p.azimuth),
                    inward_normal: -f.radial(p.azimuth),
                    axis: f.tangent,
                }
            })
            .collect()
    }

    /// Ring and azimuth counts of the generated mesh.
    pub fn grid_shape(&self) -> (usize, usize) {
        let rings = ((self.spec.segment_length / self.spec.resolution).ceil() as usize + 1).max(2);
        let around = ((TAU * self.spec.lumen_radius / self.spec.resolution).ceil() as usize).max(8);
        (rings, around)
    }
}

/// Tube mesh with inward-facing normals. Albedo is a flat 0.6 until painted.
pub fn build_phantom_mesh(spec: &PhantomSpec) -> Result<TriangleMesh> {
    let surface = PhantomSurface::new(spec)?;
    let (rings, around) = surface.grid_shape();
    let mut vertices = Vec::with_capacity(rings * around);
    for i in 0..rings {
        let s = spec.segment_length * i as f64 / (rings - 1) as f64;
        let frame = surface.centerline.frame(s);
        for j in 0..around {
            let a = TAU * j as f64 / around as f64;
            vertices.push(frame.origin + frame.radial(a) * surface.radius(s, a));
        }
    }
    let mut triangles = Vec::with_capacity(2 * (rings - 1) * around);
    for i in 0..rings - 1 {
        for j in 0..around {
            let jn = (j + 1) % around;
            let v00 = (i * around + j) as u32;
            let v01 = (i * around + jn) as u32;
            let v10 = ((i + 1) * around + j) as u32;
            let v11 = ((i + 1) * around + jn) as u32;
            triangles.push([v00, v10, v01]);
            triangles.push([v01, v10, v11]);
        }
    }
    TriangleMesh::from_geometry(vertices, triangles, 0.6)
}

/// Deterministic lattice value noise in `[-1, 1]`.
fn lattice_value(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [i, j, k] {
        h ^= v as u64;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(seed: u64, p: &Vector3<f64>, wavelength: f64) -> f64 {
    let q = p / wavelength;
    let base = q.map(f64::floor);
    let f = q - base;
    let w = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (bi, bj, bk) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - w.x } else { w.x };
                let wy = if dy == 0 { 1.0 - w.y } else { w.y };
                let wz = if dz == 0 { 1.0 - w.z } else { w.z };
                acc += wx * wy * wz * lattice_value(seed, bi + dx, bj + dy, bk + dz);
            }
        }
    }
    acc
}

/// Mucosa texture: a base level, band-limited noise, and a dark vessel
/// network traced by persistent random walks over the mesh graph.
pub fn paint_texture(mesh: &TriangleMesh, texture_seed: u64) -> TriangleMesh {
    const BASE: f64 = 0.62;
    let mut out = mesh.clone();
    let n = mesh.vertices.len();
    if n == 0 {
        return out;
    }
    let noise: Vec<f64> = mesh
        .vertices
        .par_iter()
        .map(|p| {
            0.05 * value_noise(texture_seed, p, 4.0)
                + 0.20 * value_noise(texture_seed.wrapping_add(1), p, 1.2)
                + 0.20 * value_noise(texture_seed.wrapping_add(2), p, 0.6)
        })
        .collect();

    let area: f64 = (0..mesh.triangles.len())
        .map(|t| {
            let [a, b, c] = mesh.triangle(t);
            0.5 * (b - a).cross(&(c - a)).norm()
        })
        .sum();
    let neighbors = mesh.vertex_neighbors();
    let mut vessel = vec![0.0f64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let walks = ((area / 30.0).ceil() as usize).max(3);
    let mut queue: Vec<(usize, Vector3<f64>, usize, f64)> = Vec::new();
    for _ in 0..walks {
        let start = rng.random_range(0..n);
        let heading = random_tangent(&mut rng, &mesh.normals[start]);
        let strength = rng.random_range(0.18..0.32);
        queue.push((start, heading, rng.random_range(40..90), strength));
        while let Some((mut v, mut heading, steps, strength)) = queue.pop() {
            for _ in 0..steps {
                vessel[v] = vessel[v].max(strength);
                for &w in &neighbors[v] {
                    let w = w as usize;
                    vessel[w] = vessel[w].max(0.45 * strength);
                }
                let here = mesh.vertices[v];
                let next = neighbors[v]
                    .iter()
                    .map(|&w| {
                        let d = (mesh.vertices[w as usize] - here).try_normalize(1e-12).unwrap_or_else(Vector3::zeros);
                        (w as usize, d.dot(&heading) + rng.random_range(-0.6..0.6), d)
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                let Some((w, _, d)) = next else { break };
                let jitter = random_tangent(&mut rng, &mesh.normals[w]) * 0.25;
                heading = (heading * 0.8 + d * 0.2 + jitter)
                    .try_normalize(1e-12)
                    .unwrap_or(d);
                v = w;
                if steps > 20 && rng.random_bool(0.03) {
                    let branch = random_tangent(&mut rng, &mesh.normals[v]);
                    queue.push((v, branch, steps / 2, strength * 0.8));
                }
            }
        }
    }
    for (i, a) in out.albedo.iter_mut().enumerate() {
        *a = (BASE + noise[i] - vessel[i]).clamp(0.2, 0.95);
    }
    out
}

fn random_tangent(rng: &mut ChaCha8Rng, normal: &Vector3<f64>) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = v - normal * v.dot(normal);
        if let Some(t) = t.try_normalize(1e-6) {
            return t;
        }
    }
}

/// Candidate surface patches: polyp apexes first (forced and labeled), then
/// farthest-point-sampled vertices labeled as folds/other structures. Each
/// patch holds every mesh vertex within `patch_radius` (Euclidean) of its center.
pub fn sample_candidate_patches(
    mesh: &TriangleMesh,
    spec: &PhantomSpec,
    count: usize,
    patch_radius: f64,
) -> Result<Vec<CandidatePatch>> {
    if count == 0 {
        return Err(Error::invalid("candidates", "count must be at least 1"));
    }
    if !(patch_radius > 0.0) {
        return Err(Error::invalid("candidates", "patch_radius must be positive"));
    }
    if mesh.vertices.is_empty() {
        return Err(Error::invalid("candidates", "empty mesh"));
    }
    let surface = PhantomSurface::new(spec)?;
    let nearest_vertex = |p: &Vector3<f64>| -> usize {
        mesh.vertices
            .iter()
            .enumerate()
            .map(|(i, v)| (i, (v - p).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap()
    };
    let mut centers: Vec<(usize, String)> = surface
        .polyp_sites()
        .iter()
        .map(|site| (nearest_vertex(&site.apex), site.label.clone()))
        .collect();
    centers.truncate(count);

    let mut min_d2 = vec![f64::INFINITY; mesh.vertices.len()];
    let update = |min_d2: &mut [f64], c: usize| {
        let cp = mesh.vertices[c];
        min_d2.par_iter_mut().zip(mesh.vertices.par_iter()).for_each(|(d, v)| {
            let nd = (v - cp).norm_squared();
            if nd < *d {
                *d = nd;
            }
        });
    };
    if centers.is_empty() {
        centers.push((0, FOLD_LABEL.to_string()));
    }
    for (c, _) in &centers {
        update(&mut min_d2, *c);
    }
    while centers.len() < count {
        // first maximum wins ties
        let (next, _) = min_d2
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        centers.push((next, FOLD_LABEL.to_string()));
        update(&mut min_d2, next);
    }

    let r2 = patch_radius * patch_radius;
    centers
        .par_iter()
        .enumerate()
        .map(|(id, (c, label))| {
            let center = mesh.vertices[*c];
            let points: Vec<Vector3<f64>> = mesh
                .vertices
                .iter()
                .filter(|v| (*v - center).norm_squared() <= r2)
                .copied()
                .collect();
            if points.len() < MIN_PATCH_POINTS {
                return Err(Error::PatchTooSparse { id, points: points.len() });
            }
            Ok(CandidatePatch {
                id,
                label: label.clone(),
                center,
                points: PointSet::new(points)?,
                centerline_position: surface.centerline().closest_position(&center),
            })
        })
        .collect()
}
