//! Ray-cast grayscale rendering of posed views under a camera-mounted light,
//! with exact range (ray-hit distance) output.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvh::Bvh;
use crate::cpd::PointSet;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidPose};
use crate::image::GrayImage;
use crate::mesh::TriangleMesh;

/// Intensities are quantized to this many levels, matching 16-bit graymaps.
pub const INTENSITY_LEVELS: f64 = 65535.0;

/// Minimum clearance between a camera center and the surface, mm.
pub const MIN_CLEARANCE: f64 = 1.0;

/// Point light at the camera center with inverse-square falloff.
///
/// `I = exposure · (d₀/d)² · (albedo · max(0, n·l) + specular · max(0, r·v)^shininess)`,
/// clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadlightModel {
    pub exposure: f64,
    /// Distance (mm) at which the falloff factor is 1.
    pub reference_distance: f64,
    pub specular: f64,
    pub shininess: f64,
}

impl Default for HeadlightModel {
    fn default() -> Self {
        HeadlightModel {
            exposure: 1.0,
            reference_distance: 32.0,
            specular: 0.7,
            shininess: 60.0,
        }
    }
}

impl HeadlightModel {
    #[inline]
    pub fn shade(&self, albedo: f64, normal: &Vector3<f64>, to_camera: &Vector3<f64>, distance: f64) -> f64 {
        let cos = normal.dot(to_camera).max(0.0);
        // mirror of the light direction, seen from the (co-located) viewer
        let cos_mirror = (2.0 * cos * cos - 1.0).max(0.0);
        let falloff = (self.reference_distance / distance).powi(2);
        let value = self.exposure * falloff * (albedo * cos + self.specular * cos_mirror.powf(self.shininess));
        value.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: GrayImage,
    /// Range along the pixel ray to the first hit, mm; 0 where nothing is hit.
    pub depth: GrayImage,
    pub pose: RigidPose,
    pub frame_id: u32,
}

/// A mesh prepared for repeated rendering.
pub struct Scene {
    mesh: TriangleMesh,
    bvh: Bvh,
}

impl Scene {
    pub fn new(mesh: TriangleMesh) -> Result<Self> {
        mesh.validate()?;
        let bvh = Bvh::build(&mesh);
        Ok(Scene { mesh, bvh })
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    /// Distance from `p` to the nearest surface point.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.bvh.closest_point(p).map(|(_, d)| d).unwrap_or(f64::INFINITY)
    }

    /// The camera must see only front faces in a spread of probe directions,
    /// see at least one surface, and keep [`MIN_CLEARANCE`] to the wall.
    pub fn check_camera(&self, center: &Vector3<f64>) -> bool {
        if self.surface_distance(center) <= MIN_CLEARANCE {
            return false;
        }
        let mut hits = 0;
        for dx in [-1.0, 0.0, 1.0] {
            for dy in [-1.0, 0.0, 1.0] {
                for dz in [-1.0, 0.0, 1.0] {
                    let Some(dir) = Vector3::new(dx, dy, dz).try_normalize(1e-9) else { continue };
                    if let Some(hit) = self.bvh.intersect(center, &dir) {
                        let [a, b, c] = self.mesh.triangle(hit.triangle);
                        if (b - a).cross(&(c - a)).dot(&dir) > 0.0 {
                            return false;
                        }
                        hits += 1;
                    }
                }
            }
        }
        hits > 0
    }

    pub fn render(&self, camera: &CameraModel, pose: &RigidPose, light: &HeadlightModel, frame_id: u32) -> RenderedFrame {
        let (w, h) = (camera.width, camera.height);
        let origin = pose.center();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut img = vec![0.0; w];
                let mut rng = vec![0.0; w];
                for x in 0..w {
                    let dir = pose.rotation() * camera.ray_direction(Vector2::new(x as f64, y as f64));
                    if let Some(hit) = self.bvh.intersect(&origin, &dir) {
                        let normal = self.mesh.normal_at(hit.triangle, hit.u, hit.v);
                        let albedo = self.mesh.albedo_at(hit.triangle, hit.u, hit.v);
                        let v = light.shade(albedo, &normal, &(-dir), hit.distance);
                        img[x] = (v * INTENSITY_LEVELS).round() / INTENSITY_LEVELS;
                        rng[x] = hit.distance;
                    }
                }
                (img, rng)
            })
            .collect();
        let mut image = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        for (i, d) in rows {
            image.extend(i);
            depth.extend(d);
        }
        RenderedFrame {
            image: GrayImage::from_vec(w, h, image).expect("row sizes match"),
            depth: GrayImage::from_vec(w, h, depth).expect("row sizes match"),
            pose: *pose,
            frame_id,
        }
    }

    pub fn render_views(&self, camera: &CameraModel, poses: &[RigidPose], light: &HeadlightModel) -> Result<Vec<RenderedFrame>> {
        camera.validate()?;
        if poses.is_empty() {
            return Err(Error::invalid("trajectory", "no poses to render"));
        }
        for (i, p) in poses.iter().enumerate() {
            if !self.check_camera(&p.center()) {
                return Err(Error::CameraNotInLumen(i));
            }
        }
        Ok(poses
            .iter()
            .enumerate()
            .map(|(i, p)| self.render(camera, p, light, i as u32))
            .collect())
    }
}

pub fn render_views(
    mesh: &TriangleMesh,
    camera: &CameraModel,
    poses: &[RigidPose],
    light: &HeadlightModel,
) -> Result<Vec<RenderedFrame>> {
    Scene::new(mesh.clone())?.render_views(camera, poses, light)
}

/// World-frame surface points seen by every valid-depth pixel.
pub fn ground_truth_cloud(frames: &[RenderedFrame], camera: &CameraModel) -> PointSet {
    let mut pts = Vec::new();
    for f in frames {
        let c = f.pose.center();
        for y in 0..f.depth.height() {
            for x in 0..f.depth.width() {
                let range = f.depth.get(x, y);
                if range > 0.0 {
                    let dir = f.pose.rotation() * camera.ray_direction(Vector2::new(x as f64, y as f64));
                    pts.push(c + dir * range);
                }
            }
        }
    }
    PointSet::new(pts).expect("finite ranges give finite points")
}

/// Arc of camera poses around `center` in the plane spanned by `normal` and
/// `axis`, each looking at `center` from distance `standoff`. The arc spans
/// `arc_degrees`, symmetric about `normal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSpec {
    /// Index of the polyp the orbit circles.
    pub polyp: usize,
    pub standoff: f64,
    pub arc_degrees: f64,
    pub count: usize,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        OrbitSpec {
            polyp: 1,
            standoff: 30.0,
            arc_degrees: 60.0,
            count: 16,
        }
    }
}

pub fn orbit_poses(
    center: &Vector3<f64>,
    normal: &Vector3<f64>,
    axis: &Vector3<f64>,
    standoff: f64,
    arc_degrees: f64,
    count: usize,
) -> Result<Vec<RigidPose>> {
    if count == 0 {
        return Err(Error::invalid("trajectory", "orbit needs at least one pose"));
    }
    if !(standoff > 0.0) {
        return Err(Error::invalid("trajectory", "standoff must be positive"));
    }
    let n = normal.normalize();
    let t = (axis - n * axis.dot(&n))
        .try_normalize(1e-9)
        .ok_or_else(|| Error::invalid("trajectory", "orbit axis parallel to normal"))?;
    let side = t.cross(&n);
    let half = arc_degrees.to_radians() / 2.0;
    (0..count)
        .map(|i| {
            let phi = if count == 1 {
                0.0
            } else {
                -half + 2.0 * half * i as f64 / (count - 1) as f64
            };
            let eye = center + (n * phi.cos() + t * phi.sin()) * standoff;
            RigidPose::look_at(eye, *center, side)
        })
        .collect()
}
