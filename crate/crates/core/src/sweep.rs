//! Multi-view plane-sweep depth estimation.
//!
//! Fronto-parallel planes are swept through the reference camera. For every
//! reference pixel and plane, each view is sampled through the plane-induced
//! homography and the matching cost is the variance of the sampled window
//! vectors across views:
//!
//! ```text
//! ζ = (1/N) Σᵢ Iᵢᵀ Iᵢ − sᵀ s,    s = (1/N) Σᵢ Iᵢ
//! ```
//!
//! where `Iᵢ` is the flattened window of view `i` and `N` counts the views
//! whose whole window falls inside the image and off specular highlights.
//! With [`SweepConfig::normalize_gain`] each `Iᵢ` is first divided by its
//! mean.

use nalgebra::{Matrix3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpd::PointSet;
use crate::error::{Error, Result};
use crate::geometry::{plane_homography, transfer, CameraModel, Plane3, RigidPose};
use crate::image::{GrayImage, Mask};

pub const MAX_VIEWS: usize = 32;

/// Views whose window mean falls below this are dropped under gain
/// normalization.
pub const MIN_WINDOW_MEAN: f64 = 1e-3;

/// A grayscale view with its camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: GrayImage,
    pub pose: RigidPose,
    pub id: u32,
}

#[derive(Debug, Clone)]
pub struct ViewSet {
    camera: CameraModel,
    reference: Frame,
    others: Vec<Frame>,
}

impl ViewSet {
    pub fn new(camera: CameraModel, reference: Frame, others: Vec<Frame>) -> Result<Self> {
        camera.validate()?;
        let count = 1 + others.len();
        if count < 2 {
            return Err(Error::InsufficientViews(count));
        }
        if count > MAX_VIEWS {
            return Err(Error::invalid("view set", format!("{count} views exceeds the maximum of {MAX_VIEWS}")));
        }
        for f in std::iter::once(&reference).chain(&others) {
            if f.image.width() != camera.width || f.image.height() != camera.height {
                return Err(Error::invalid("view set", format!("frame {} does not match the camera size", f.id)));
            }
        }
        Ok(ViewSet {
            camera,
            reference,
            others,
        })
    }

    /// Uses the middle frame (`len / 2`) of a sequence as the reference.
    pub fn from_sequence(camera: CameraModel, mut frames: Vec<Frame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InsufficientViews(frames.len()));
        }
        let reference = frames.remove(frames.len() / 2);
        ViewSet::new(camera, reference, frames)
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn reference(&self) -> &Frame {
        &self.reference
    }

    pub fn others(&self) -> &[Frame] {
        &self.others
    }

    pub fn len(&self) -> usize {
        1 + self.others.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Reference first, then the other views in order.
    pub fn views(&self) -> impl Iterator<Item = &Frame> {
        std::iter::once(&self.reference).chain(self.others.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlaneSpacing {
    UniformDepth,
    UniformInverseDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub plane_count: usize,
    pub spacing: PlaneSpacing,
    /// Odd window side in pixels.
    pub window: usize,
    /// Divide every view's window vector by its own mean before taking the
    /// variance, cancelling the per-view brightness change of a light that
    /// moves with the camera.
    pub normalize_gain: bool,
    pub specular_threshold: f64,
    /// A cell is scored only when at least `max(2, ⌈fraction · N_V⌉)` views
    /// contribute, so near planes seen by few views cannot win by default.
    pub min_view_fraction: f64,
    /// Pixels whose reference window has a smaller standard deviation to mean
    /// ratio are rejected as textureless. `0` disables the test.
    pub min_contrast: f64,
    /// Pixels whose minimum cost exceeds this are rejected.
    pub cost_reject_threshold: f64,
    /// Pixels whose minimum cost exceeds this fraction of their median plane
    /// cost are rejected as ambiguous. `1.0` or more disables the test.
    pub uniqueness_ratio: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            z_min: 5.0,
            z_max: 120.0,
            plane_count: 96,
            spacing: PlaneSpacing::UniformInverseDepth,
            window: 5,
            normalize_gain: true,
            min_view_fraction: 0.5,
            min_contrast: 0.04,
            specular_threshold: 0.98,
            cost_reject_threshold: 0.5,
            uniqueness_ratio: 0.18,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_min > 0.0 && self.z_min < self.z_max && self.z_max.is_finite()) {
            return Err(Error::invalid("sweep config", "need 0 < z_min < z_max"));
        }
        if self.plane_count < 2 {
            return Err(Error::invalid("sweep config", "plane_count must be at least 2"));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::invalid("sweep config", "window must be odd and at least 1"));
        }
        if self.normalize_gain && self.window == 1 {
            return Err(Error::invalid("sweep config", "normalize_gain needs a window larger than 1"));
        }
        if !(0.0..=1.0).contains(&self.min_view_fraction) {
            return Err(Error::invalid("sweep config", "min_view_fraction must be in [0, 1]"));
        }
        if !(self.min_contrast >= 0.0) {
            return Err(Error::invalid("sweep config", "min_contrast must be nonnegative"));
        }
        if !(self.specular_threshold > 0.0 && self.specular_threshold <= 1.0) {
            return Err(Error::invalid("sweep config", "specular_threshold must be in (0, 1]"));
        }
        if !(self.cost_reject_threshold >= 0.0) {
            return Err(Error::invalid("sweep config", "cost_reject_threshold must be nonnegative"));
        }
        if !(self.uniqueness_ratio > 0.0) {
            return Err(Error::invalid("sweep config", "uniqueness_ratio must be positive"));
        }
        Ok(())
    }

    /// Fewest contributing views for a scored cell out of `views` in total.
    pub fn min_views(&self, views: usize) -> usize {
        ((self.min_view_fraction * views as f64).ceil() as usize).max(2)
    }

    /// Depth of a (possibly fractional) plane index; index 0 is `z_min`.
    pub fn depth_at(&self, index: f64) -> f64 {
        let f = index / (self.plane_count - 1) as f64;
        match self.spacing {
            PlaneSpacing::UniformDepth => self.z_min + f * (self.z_max - self.z_min),
            PlaneSpacing::UniformInverseDepth => 1.0 / (1.0 / self.z_min + f * (1.0 / self.z_max - 1.0 / self.z_min)),
        }
    }

    pub fn plane_depths(&self) -> Vec<f64> {
        (0..self.plane_count).map(|k| self.depth_at(k as f64)).collect()
    }

    /// Local spacing between adjacent planes around depth `z`.
    pub fn spacing_at(&self, z: f64) -> f64 {
        match self.spacing {
            PlaneSpacing::UniformDepth => (self.z_max - self.z_min) / (self.plane_count - 1) as f64,
            PlaneSpacing::UniformInverseDepth => {
                z * z * (1.0 / self.z_min - 1.0 / self.z_max) / (self.plane_count - 1) as f64
            }
        }
    }
}

/// Per-pixel, per-plane dissimilarity. `+inf` marks pixels that could not be
/// scored (masked, or fewer than two contributing views).
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    depths: Vec<f64>,
    /// Plane-major: `values[k * width * height + y * width + x]`.
    values: Vec<f64>,
    masked: Vec<bool>,
}

impl CostVolume {
    pub fn from_parts(width: usize, height: usize, depths: Vec<f64>, values: Vec<f64>, masked: Vec<bool>) -> Result<Self> {
        if values.len() != width * height * depths.len() || masked.len() != width * height {
            return Err(Error::invalid("cost volume", "dimension mismatch"));
        }
        Ok(CostVolume {
            width,
            height,
            depths,
            values,
            masked,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane_count(&self) -> usize {
        self.depths.len()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, plane: usize) -> f64 {
        self.values[plane * self.width * self.height + y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, plane: usize, v: f64) {
        self.values[plane * self.width * self.height + y * self.width + x] = v;
    }

    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.masked[y * self.width + x]
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[k * n..(k + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    /// z-depth along the reference optical axis, mm; 0 = rejected.
    depth: Vec<f64>,
    /// Minimum cost per pixel.
    confidence: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, confidence: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height || confidence.len() != width * height {
            return Err(Error::invalid("depth map", "dimension mismatch"));
        }
        Ok(DepthMap {
            width,
            height,
            depth,
            confidence,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn depth(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    #[inline]
    pub fn confidence(&self, x: usize, y: usize) -> f64 {
        self.confidence[y * self.width + x]
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidence
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Pixels at or above `threshold`, dilated by one pixel.
pub fn detect_specular_mask(image: &GrayImage, threshold: f64) -> Mask {
    let mut m = Mask::new(image.width(), image.height());
    for y in 0..image.height() {
        for x in 0..image.width() {
            if image.get(x, y) >= threshold {
                m.set(x, y, true);
            }
        }
    }
    m.dilate()
}

/// One view resampled onto the reference grid through a plane.
struct Warp {
    values: Vec<f64>,
    /// Summed-area table of invalid samples, `(w+1) x (h+1)`.
    invalid_sat: Vec<u32>,
}

fn warp_view(image: &GrayImage, mask: &Mask, h: &Matrix3<f64>, width: usize, height: usize) -> Warp {
    let mut values = vec![0.0; width * height];
    let mut invalid = vec![0u32; width * height];
    let (iw, ih) = (image.width(), image.height());
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let sample = transfer(h, x as f64, y as f64).and_then(|(u, v)| {
                let s = image.sample_bilinear(u, v)?;
                let nx = (u.round() as usize).min(iw - 1);
                let ny = (v.round() as usize).min(ih - 1);
                (!mask.get(nx, ny)).then_some(s)
            });
            match sample {
                Some(s) => values[i] = s,
                None => invalid[i] = 1,
            }
        }
    }
    let sw = width + 1;
    let mut sat = vec![0u32; sw * (height + 1)];
    for y in 0..height {
        let mut row = 0;
        for x in 0..width {
            row += invalid[y * width + x];
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    Warp {
        values,
        invalid_sat: sat,
    }
}

impl Warp {
    #[inline]
    fn window_valid(&self, width: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> bool {
        let sw = width + 1;
        let s = self.invalid_sat[(y1 + 1) * sw + x1 + 1] + self.invalid_sat[y0 * sw + x0]
            - self.invalid_sat[y0 * sw + x1 + 1]
            - self.invalid_sat[(y1 + 1) * sw + x0];
        s == 0
    }

    #[inline]
    fn window_sum(&self, width: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let mut sum = 0.0;
        for y in y0..=y1 {
            sum += self.values[y * width + x0..=y * width + x1].iter().sum::<f64>();
        }
        sum
    }
}

/// Plane-to-reference homographies for every view (reference first).
pub fn sweep_homographies(views: &ViewSet, depth: f64) -> Result<Vec<Matrix3<f64>>> {
    let cam = views.camera();
    let plane = Plane3::fronto_parallel(&views.reference().pose, depth);
    views
        .views()
        .map(|f| plane_homography((cam, &views.reference().pose), (cam, &f.pose), &plane))
        .collect()
}

pub fn sweep_cost(views: &ViewSet, config: &SweepConfig) -> Result<CostVolume> {
    config.validate()?;
    if views.len() < 2 {
        return Err(Error::InsufficientViews(views.len()));
    }
    let masks: Vec<Mask> = views
        .views()
        .map(|f| detect_specular_mask(&f.image, config.specular_threshold))
        .collect();
    sweep_cost_masked(views, config, &masks)
}

/// Cost volume with caller-supplied per-view masks (reference first).
pub fn sweep_cost_masked(views: &ViewSet, config: &SweepConfig, masks: &[Mask]) -> Result<CostVolume> {
    config.validate()?;
    if masks.len() != views.len() {
        return Err(Error::invalid("sweep", "one mask per view required"));
    }
    let (w, h) = (views.camera().width, views.camera().height);
    let ref_mask = &masks[0];
    let masked: Vec<bool> = (0..w * h).map(|i| ref_mask.get(i % w, i / w)).collect();
    let depths = config.plane_depths();
    let r = config.window / 2;
    let frames: Vec<&Frame> = views.views().collect();
    let min_members = config.min_views(frames.len());

    let planes: Vec<Vec<f64>> = depths
        .par_iter()
        .map(|&z| -> Result<Vec<f64>> {
            let mut hs = sweep_homographies(views, z)?;
            // exact, so reference samples land on pixel centers
            hs[0] = Matrix3::identity();
            let warps: Vec<Warp> = frames
                .iter()
                .zip(masks)
                .zip(&hs)
                .map(|((f, m), hm)| warp_view(&f.image, m, hm, w, h))
                .collect();
            let mut out = vec![f64::INFINITY; w * h];
            let mut sums = vec![0.0; config.window * config.window];
            let mut squares = vec![0.0; config.window * config.window];
            let mut members: Vec<(usize, f64)> = Vec::with_capacity(warps.len());
            for y in 0..h {
                let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
                for x in 0..w {
                    if masked[y * w + x] {
                        continue;
                    }
                    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                    let cols = x1 - x0 + 1;
                    let cells = cols * (y1 - y0 + 1);
                    members.clear();
                    for (v, warp) in warps.iter().enumerate() {
                        if !warp.window_valid(w, x0, y0, x1, y1) {
                            continue;
                        }
                        let gain = if config.normalize_gain {
                            let mean = warp.window_sum(w, x0, y0, x1, y1) / cells as f64;
                            if mean < MIN_WINDOW_MEAN {
                                continue;
                            }
                            1.0 / mean
                        } else {
                            1.0
                        };
                        members.push((v, gain));
                    }
                    if members.len() < min_members {
                        continue;
                    }
                    sums[..cells].iter_mut().for_each(|s| *s = 0.0);
                    squares[..cells].iter_mut().for_each(|s| *s = 0.0);
                    for &(v, gain) in &members {
                        let vals = &warps[v].values;
                        for (row, qy) in (y0..=y1).enumerate() {
                            let base = qy * w;
                            for (col, qx) in (x0..=x1).enumerate() {
                                let s = vals[base + qx] * gain;
                                let c = row * cols + col;
                                sums[c] += s;
                                squares[c] += s * s;
                            }
                        }
                    }
                    let inv_n = 1.0 / members.len() as f64;
                    let mut zeta = 0.0;
                    for c in 0..cells {
                        let mean = sums[c] * inv_n;
                        zeta += squares[c] * inv_n - mean * mean;
                    }
                    out[y * w + x] = zeta.max(0.0);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let values = planes.concat();
    CostVolume::from_parts(w, h, depths, values, masked)
}

/// Winner-take-all plane selection with parabolic sub-plane refinement.
pub fn select_depth(volume: &CostVolume, config: &SweepConfig) -> DepthMap {
    let (w, h) = (volume.width, volume.height);
    let k_count = volume.plane_count();
    let mut depth = vec![0.0; w * h];
    let mut confidence = vec![f64::INFINITY; w * h];
    let mut finite = Vec::with_capacity(k_count);
    for i in 0..w * h {
        if volume.masked[i] {
            continue;
        }
        let cost = |k: usize| volume.values[k * w * h + i];
        let mut best = None;
        let mut best_cost = f64::INFINITY;
        finite.clear();
        for k in 0..k_count {
            let c = cost(k);
            if c.is_finite() {
                finite.push(c);
                if c < best_cost {
                    best_cost = c;
                    best = Some(k);
                }
            }
        }
        let Some(k) = best else { continue };
        confidence[i] = best_cost;
        if best_cost > config.cost_reject_threshold {
            continue;
        }
        if config.uniqueness_ratio < 1.0 {
            let mid = finite.len() / 2;
            let median = *finite.select_nth_unstable_by(mid, f64::total_cmp).1;
            if best_cost > config.uniqueness_ratio * median {
                continue;
            }
        }
        let mut index = k as f64;
        if k > 0 && k + 1 < k_count {
            let (cl, cr) = (cost(k - 1), cost(k + 1));
            if cl.is_finite() && cr.is_finite() {
                let denom = cl - 2.0 * best_cost + cr;
                if denom > 0.0 {
                    index += (0.5 * (cl - cr) / denom).clamp(-0.5, 0.5);
                }
            }
        }
        depth[i] = if (index - k as f64).abs() > 0.0 {
            config.depth_at(index)
        } else {
            volume.depths[k]
        };
    }
    DepthMap {
        width: w,
        height: h,
        depth,
        confidence,
    }
}

/// World-frame points for every nonzero depth, with the min-cost confidence.
pub fn depth_to_pointcloud(depth: &DepthMap, camera: &CameraModel, pose: &RigidPose) -> PointSet {
    let mut pts = Vec::new();
    let mut conf = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let z = depth.depth(x, y);
            if z > 0.0 {
                let p = camera.backproject(Vector2::new(x as f64, y as f64), z);
                pts.push(pose.to_world(&p));
                conf.push(depth.confidence(x, y));
            }
        }
    }
    PointSet::with_confidence(pts, conf).expect("finite depths give finite points")
}

/// Pixels whose reference window has a coefficient of variation (standard
/// deviation over mean) below `min_contrast`; windows are clipped at the border.
pub fn low_contrast_mask(image: &GrayImage, window: usize, min_contrast: f64) -> Mask {
    let (w, h) = (image.width(), image.height());
    let r = window / 2;
    let mut mask = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
            for qy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for qx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let v = image.get(qx, qy);
                    sum += v;
                    sq += v * v;
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let sd = (sq / n - mean * mean).max(0.0).sqrt();
            if !(mean > 0.0 && sd >= min_contrast * mean) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Sweep and select, then reject pixels whose reference window is too flat to match.
pub fn reconstruct_depth(views: &ViewSet, config: &SweepConfig) -> Result<DepthMap> {
    let volume = sweep_cost(views, config)?;
    let mut depth = select_depth(&volume, config);
    if config.min_contrast > 0.0 {
        let flat = low_contrast_mask(&views.reference().image, config.window, config.min_contrast);
        for (i, z) in depth.depth.iter_mut().enumerate() {
            if flat.get(i % flat.width(), i / flat.width()) {
                *z = 0.0;
            }
        }
    }
    Ok(depth)
}

pub fn reconstruct(views: &ViewSet, config: &SweepConfig) -> Result<PointSet> {
    let depth = reconstruct_depth(views, config)?;
    Ok(depth_to_pointcloud(&depth, views.camera(), &views.reference().pose))
}
