#![allow(dead_code)]

use nalgebra::{Matrix3, Vector2, Vector3};
use ocmatch_core::geometry::{axis_angle, rotation_angle};
use ocmatch_core::render::Scene;
use ocmatch_core::sweep::{detect_specular_mask, reconstruct_depth, Frame, PlaneSpacing, ViewSet};
use ocmatch_core::{
    phantom, register, CameraModel, CpdConfig, GrayImage, HeadlightModel, PointSet, RigidPose, SimilarityTransform,
    SweepConfig, TriangleMesh,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bilinear(img: &GrayImage, u: f64, v: f64) -> Option<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if u < 0.0 || v < 0.0 || u > w - 1.0 || v > h - 1.0 {
        return None;
    }
    let x0 = (u.floor() as usize).min(img.width() - 2);
    let y0 = (v.floor() as usize).min(img.height() - 2);
    let (a, b) = (u - x0 as f64, v - y0 as f64);
    Some(
        (1.0 - a) * (1.0 - b) * img.get(x0, y0)
            + a * (1.0 - b) * img.get(x0 + 1, y0)
            + (1.0 - a) * b * img.get(x0, y0 + 1)
            + a * b * img.get(x0 + 1, y0 + 1),
    )
}

fn specular(img: &GrayImage, threshold: f64, x: usize, y: usize) -> bool {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for dy in -1..=1i64 {
        for dx in -1..=1i64 {
            let (qx, qy) = (x as i64 + dx, y as i64 + dy);
            if qx >= 0 && qy >= 0 && qx < w && qy < h && img.get(qx as usize, qy as usize) >= threshold {
                return true;
            }
        }
    }
    false
}

/// Brute-force variance cost: every view's window is gathered by explicit
/// back-projection onto the plane and re-projection, one element at a time.
/// Returns plane-major values, `+inf` where unscored.
pub fn naive_cost(cam: &CameraModel, frames: &[Frame], cfg: &SweepConfig) -> Vec<f64> {
    let (w, h) = (cam.width, cam.height);
    let r = (cfg.window / 2) as i64;
    let reference = &frames[0];
    let mut out = Vec::with_capacity(cfg.plane_count * w * h);
    for z in cfg.plane_depths() {
        for y in 0..h {
            for x in 0..w {
                if specular(&reference.image, cfg.specular_threshold, x, y) {
                    out.push(f64::INFINITY);
                    continue;
                }
                let mut vectors: Vec<Vec<f64>> = Vec::new();
                for (v, f) in frames.iter().enumerate() {
                    let mut vec = Vec::new();
                    let mut ok = true;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                            if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                                continue;
                            }
                            let (u, vv) = if v == 0 {
                                (qx as f64, qy as f64)
                            } else {
                                let p_ref = Vector3::new(
                                    (qx as f64 - cam.cx) / cam.fx * z,
                                    (qy as f64 - cam.cy) / cam.fy * z,
                                    z,
                                );
                                let world = reference.pose.rotation() * p_ref + reference.pose.translation();
                                let p = f.pose.rotation().transpose() * (world - f.pose.translation());
                                if p.z <= 0.0 {
                                    ok = false;
                                    continue;
                                }
                                (cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy)
                            };
                            match bilinear(&f.image, u, vv) {
                                Some(s) => {
                                    let nx = (u.round() as usize).min(w - 1);
                                    let ny = (vv.round() as usize).min(h - 1);
                                    if specular(&f.image, cfg.specular_threshold, nx, ny) {
                                        ok = false;
                                    }
                                    vec.push(s);
                                }
                                None => ok = false,
                            }
                        }
                    }
                    if !ok {
                        continue;
                    }
                    if cfg.normalize_gain {
                        let mean = vec.iter().sum::<f64>() / vec.len() as f64;
                        if mean < 1e-3 {
                            continue;
                        }
                        vec.iter_mut().for_each(|s| *s /= mean);
                    }
                    vectors.push(vec);
                }
                let needed = ((cfg.min_view_fraction * frames.len() as f64).ceil() as usize).max(2);
                if vectors.len() < needed {
                    out.push(f64::INFINITY);
                    continue;
                }
                let n = vectors.len() as f64;
                let mut zeta = 0.0;
                for e in 0..vectors[0].len() {
                    let mean = vectors.iter().map(|v| v[e]).sum::<f64>() / n;
                    zeta += vectors.iter().map(|v| (v[e] - mean).powi(2)).sum::<f64>() / n;
                }
                out.push(zeta);
            }
        }
    }
    out
}

/// Smooth random intensity field in `[0.1, 0.9]`.
pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(0.0..6.3),
                rng.random_range(0.02..0.07),
            )
        })
        .collect();
    GrayImage::from_fn(w, h, |x, y| {
        let v: f64 = waves
            .iter()
            .map(|(a, b, p, amp)| amp * (a * x as f64 + b * y as f64 + p).sin())
            .sum();
        (0.5 + v).clamp(0.1, 0.9)
    })
}

pub fn small_camera() -> CameraModel {
    CameraModel::new(16.0, 16.0, 7.5, 7.5, 16, 16).unwrap()
}

/// Three 16x16 views with small random baselines and rotations, reference first.
pub fn oracle_views(seed: u64) -> (CameraModel, Vec<Frame>) {
    let mut r = rng(seed);
    let cam = small_camera();
    let frames = (0..3)
        .map(|i| {
            let pose = if i == 0 {
                RigidPose::identity()
            } else {
                let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 1.0);
                let rot = axis_angle(&axis, r.random_range(0.0..0.04));
                let t = Vector3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
                RigidPose::new(rot, t).unwrap()
            };
            let mut image = random_image(&mut r, cam.width, cam.height);
            if i == 1 {
                image.set(r.random_range(2..14), r.random_range(2..14), 1.0);
            }
            Frame { image, pose, id: i }
        })
        .collect();
    (cam, frames)
}

pub fn oracle_config(normalize_gain: bool) -> SweepConfig {
    SweepConfig {
        z_min: 10.0,
        z_max: 30.0,
        plane_count: 5,
        window: 5,
        normalize_gain,
        ..SweepConfig::default()
    }
}

/// Headlight renders of a textured fronto-parallel plane at 50 mm seen from
/// five cameras on a lateral baseline, swept with 1 mm plane spacing.
/// Returns the fraction of pixels outside the reference specular mask whose
/// depth lies within 0.5 mm of 50 mm, and the number of such pixels.
pub fn lit_plane_accuracy(specular: f64) -> (f64, usize) {
    let mesh = phantom::paint_texture(&TriangleMesh::plane_grid(80.0, 50.0, 160), 3);
    let scene = Scene::new(mesh).unwrap();
    let cam = CameraModel::default();
    let light = HeadlightModel {
        reference_distance: 50.0,
        specular,
        ..HeadlightModel::default()
    };
    let frames: Vec<Frame> = (0..5u32)
        .map(|i| {
            let pose = RigidPose::from_translation(Vector3::new((i as f64 - 2.0) * 2.5, 0.0, 0.0));
            Frame {
                image: scene.render(&cam, &pose, &light, i).image,
                pose,
                id: i,
            }
        })
        .collect();
    let cfg = SweepConfig {
        z_min: 30.0,
        z_max: 70.0,
        plane_count: 41,
        spacing: PlaneSpacing::UniformDepth,
        ..SweepConfig::default()
    };
    let views = ViewSet::from_sequence(cam, frames).unwrap();
    let mask = detect_specular_mask(&views.reference().image, cfg.specular_threshold);
    let d = reconstruct_depth(&views, &cfg).unwrap();
    let mut unmasked = 0;
    let mut good = 0;
    for y in 0..cam.height {
        for x in 0..cam.width {
            if !mask.get(x, y) {
                unmasked += 1;
                if (d.depth(x, y) - 50.0).abs() <= 0.5 {
                    good += 1;
                }
            }
        }
    }
    (good as f64 / unmasked as f64, unmasked)
}

/// Fraction of depth-map pixels within one plane spacing of the renderer's
/// z-depth for the same (reference) frame.
pub fn depth_accuracy(
    depth: &ocmatch_core::DepthMap,
    range: &GrayImage,
    cam: &CameraModel,
    cfg: &SweepConfig,
) -> (f64, usize) {
    let mut total = 0;
    let mut good = 0;
    for y in 0..cam.height {
        for x in 0..cam.width {
            let z = depth.depth(x, y);
            let r = range.get(x, y);
            if z <= 0.0 || r <= 0.0 {
                continue;
            }
            let z_true = r * cam.ray_direction(Vector2::new(x as f64, y as f64)).z;
            total += 1;
            if (z - z_true).abs() <= cfg.spacing_at(z_true) {
                good += 1;
            }
        }
    }
    (good as f64 / total.max(1) as f64, total)
}

/// Asymmetric height-field patch on a 2.4 x 1.6 footprint.
pub fn height_field_patch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(-1.2..1.2);
            let v: f64 = rng.random_range(-0.8..0.8);
            let bump = 0.6 * (-((u - 0.3).powi(2) + (v + 0.2).powi(2)) / 0.1).exp();
            Vector3::new(u, v, bump + 0.3 * u * u - 0.2 * v + 0.25 * u * v)
        })
        .collect()
}

pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    loop {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if axis.norm() > 0.1 {
            return axis_angle(&axis, rng.random_range(0.0..max_angle));
        }
    }
}

pub fn random_similarity(rng: &mut ChaCha8Rng) -> SimilarityTransform {
    let rot = random_rotation(rng, 60f64.to_radians());
    let scale = rng.random_range(0.8..1.25);
    let t = Vector3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    );
    SimilarityTransform::new(rot, scale, t).unwrap()
}

pub fn rotation_error_degrees(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a * b.transpose())).to_degrees()
}

pub struct RecoveryCase {
    pub rotation_error: f64,
    pub sigma: f64,
    pub sigma2_history: Vec<f64>,
}

/// Registers a 500-point patch onto its image under a random similarity.
/// `noise` is the Gaussian standard deviation relative to the target's RMS
/// radius (the normalized extent).
pub fn recovery_case(seed: u64, noise: f64) -> RecoveryCase {
    let mut r = rng(seed);
    let source = height_field_patch(&mut r, 500);
    let truth = random_similarity(&mut r);
    let mut target: Vec<Vector3<f64>> = source.iter().map(|p| truth.apply(p)).collect();
    if noise > 0.0 {
        let c = target.iter().sum::<Vector3<f64>>() / target.len() as f64;
        let rms = (target.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / target.len() as f64).sqrt();
        let dist = Normal::new(0.0, noise * rms).unwrap();
        for p in target.iter_mut() {
            *p += Vector3::new(dist.sample(&mut r), dist.sample(&mut r), dist.sample(&mut r));
        }
    }
    let result = register(
        &PointSet::new(target).unwrap(),
        &PointSet::new(source).unwrap(),
        &CpdConfig::default(),
    )
    .unwrap();
    RecoveryCase {
        rotation_error: rotation_error_degrees(result.transform.rotation(), truth.rotation()),
        sigma: result.sigma,
        sigma2_history: result.sigma2_history,
    }
}

pub fn is_non_increasing(history: &[f64], slack: f64) -> bool {
    history.windows(2).all(|w| w[1] <= w[0] + slack)
}
