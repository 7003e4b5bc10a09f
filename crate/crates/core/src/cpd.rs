//! Rigid (similarity) Coherent Point Drift.
//!
//! The source set `Y` (M points) is the moving set of Gaussian centroids; the
//! target set `X` (N points) is the data. EM alternates posterior
//! responsibilities (E-step) with a closed-form similarity update (M-step).
//! Both sets are normalized to zero centroid and unit RMS radius first, so the
//! reported σ is unitless and comparable across candidates.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;

const D: f64 = 3.0;
const SIGMA2_FLOOR: f64 = 1e-12;

/// A set of 3D points with optional per-point confidence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    points: Vec<Vector3<f64>>,
    confidence: Option<Vec<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("point set", "non-finite coordinate"));
        }
        Ok(PointSet {
            points,
            confidence: None,
        })
    }

    pub fn with_confidence(points: Vec<Vector3<f64>>, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != points.len() {
            return Err(Error::invalid("point set", "confidence length differs from point count"));
        }
        let mut set = PointSet::new(points)?;
        set.confidence = Some(confidence);
        Ok(set)
    }

    pub fn empty() -> Self {
        PointSet::default()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn confidence(&self) -> Option<&[f64]> {
        self.confidence.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        (!self.is_empty()).then(|| self.points.iter().sum::<Vector3<f64>>() / self.len() as f64)
    }

    /// Points (and confidences) at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        PointSet {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            confidence: self
                .confidence
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Points within `radius` of `center`.
    pub fn crop_sphere(&self, center: &Vector3<f64>, radius: f64) -> PointSet {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| (self.points[i] - center).norm() <= radius)
            .collect();
        self.select(&idx)
    }

    /// Seeded uniform subsample without replacement, keeping the original order.
    pub fn subsample(&self, max_points: usize, seed: u64) -> PointSet {
        if self.len() <= max_points {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), max_points).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    pub fn map(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> PointSet {
        PointSet {
            points: self.points.iter().map(f).collect(),
            confidence: self.confidence.clone(),
        }
    }
}

/// Maps normalized coordinates back to the original frame: `p = scale * q + centroid`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub centroid: Vector3<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            centroid: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.centroid) / self.scale
    }

    pub fn denormalize(&self, q: &Vector3<f64>) -> Vector3<f64> {
        q * self.scale + self.centroid
    }
}

/// Zero centroid and unit root-mean-square radius.
pub fn normalize_pointset(p: &PointSet) -> Result<(PointSet, Normalization)> {
    let centroid = p.centroid().ok_or(Error::EmptyPointSet)?;
    let ms = p.points.iter().map(|q| (q - centroid).norm_squared()).sum::<f64>() / p.len() as f64;
    let scale = ms.sqrt();
    if !(scale > 1e-12 * (1.0 + centroid.norm())) {
        return Err(Error::DegeneratePointSet);
    }
    let record = Normalization { centroid, scale };
    Ok((p.map(|q| record.normalize(q)), record))
}

pub fn denormalize_pointset(p: &PointSet, record: &Normalization) -> PointSet {
    p.map(|q| record.denormalize(q))
}

/// `σ² = Σₙ Σₘ ‖xₙ − yₘ‖² / (D·N·M)`, summed directly so that sets far from
/// the origin do not lose precision.
pub fn init_sigma2(x: &PointSet, y: &PointSet) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let (n, m) = (x.len() as f64, y.len() as f64);
    // per-row partial sums, reduced in order for run-to-run determinism
    let rows: Vec<f64> = x
        .points
        .par_iter()
        .map(|xn| y.points.iter().map(|ym| (xn - ym).norm_squared()).sum::<f64>())
        .collect();
    let total: f64 = rows.iter().sum();
    Ok(total / (D * n * m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpdConfig {
    /// Uniform outlier weight `w` in `[0, 1)`.
    pub outlier_weight: f64,
    pub max_iterations: usize,
    /// Stop once `|Δσ²| / σ²` falls below this.
    pub sigma2_tolerance: f64,
    pub estimate_scale: bool,
    /// Per-set cap; larger sets are uniformly subsampled.
    pub max_points: usize,
    pub rng_seed: u64,
}

impl Default for CpdConfig {
    fn default() -> Self {
        CpdConfig {
            outlier_weight: 0.1,
            max_iterations: 150,
            sigma2_tolerance: 1e-8,
            estimate_scale: true,
            max_points: 1500,
            rng_seed: 0,
        }
    }
}

impl CpdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_weight) {
            return Err(Error::invalid("cpd config", "outlier_weight must be in [0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("cpd config", "max_iterations must be at least 1"));
        }
        if !(self.sigma2_tolerance > 0.0) {
            return Err(Error::invalid("cpd config", "sigma2_tolerance must be positive"));
        }
        if self.max_points == 0 {
            return Err(Error::invalid("cpd config", "max_points must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps normalized source points onto normalized target points.
    pub transform: SimilarityTransform,
    /// `sqrt(σ²)` in normalized units.
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Total posterior mass `N_p` of the final E-step.
    pub correspondence_mass: f64,
    #[serde(skip)]
    pub target_normalization: Option<Normalization>,
    #[serde(skip)]
    pub source_normalization: Option<Normalization>,
    /// σ² after initialization and after every M-step.
    #[serde(skip)]
    pub sigma2_history: Vec<f64>,
}

/// Posterior responsibilities `P` (M×N, column `n` belongs to target point `xₙ`).
pub fn e_step(
    x: &PointSet,
    y: &PointSet,
    transform: &SimilarityTransform,
    sigma2: f64,
    w: f64,
) -> Result<DMatrix<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("e-step", "sigma2 must be positive"));
    }
    if !(0.0..1.0).contains(&w) {
        return Err(Error::invalid("e-step", "outlier weight must be in [0, 1)"));
    }
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let ty: Vec<Vector3<f64>> = y.points.iter().map(|p| transform.apply(p)).collect();
    let mut p = DMatrix::zeros(y.len(), x.len());
    fill_posterior(&x.points, &ty, sigma2, w, &mut p);
    Ok(p)
}

fn fill_posterior(x: &[Vector3<f64>], ty: &[Vector3<f64>], sigma2: f64, w: f64, p: &mut DMatrix<f64>) {
    let m = ty.len();
    let n = x.len();
    // log of (2πσ²)^{D/2} · w/(1−w) · M/N; -inf when w = 0
    let log_outlier = if w > 0.0 {
        (D / 2.0) * (2.0 * std::f64::consts::PI * sigma2).ln() + (w / (1.0 - w)).ln() + (m as f64 / n as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    let inv_two_sigma2 = 1.0 / (2.0 * sigma2);
    p.as_mut_slice()
        .par_chunks_mut(m)
        .zip(x.par_iter())
        .for_each(|(col, xn)| {
            let mut max_e = f64::NEG_INFINITY;
            for (c, yk) in col.iter_mut().zip(ty) {
                let e = -(xn - yk).norm_squared() * inv_two_sigma2;
                *c = e;
                if e > max_e {
                    max_e = e;
                }
            }
            let shifted_outlier = log_outlier - max_e;
            if shifted_outlier > 700.0 {
                // the outlier term swamps every component
                col.iter_mut().for_each(|c| *c = 0.0);
                return;
            }
            let mut sum = 0.0;
            for c in col.iter_mut() {
                *c = (*c - max_e).exp();
                sum += *c;
            }
            let denom = sum + shifted_outlier.exp();
            if denom.is_finite() && denom > 0.0 {
                let inv = 1.0 / denom;
                col.iter_mut().for_each(|c| *c *= inv);
            } else {
                let u = 1.0 / m as f64;
                col.iter_mut().for_each(|c| *c = u);
            }
        });
}

/// Closed-form similarity update and new σ² from posteriors `P` (M×N).
pub fn m_step(
    x: &PointSet,
    y: &PointSet,
    p: &DMatrix<f64>,
    estimate_scale: bool,
) -> Result<(SimilarityTransform, f64)> {
    let (m, n) = (y.len(), x.len());
    if p.nrows() != m || p.ncols() != n {
        return Err(Error::invalid("m-step", "posterior shape does not match the point sets"));
    }
    let mut p1 = vec![0.0; m];
    let mut pt1 = vec![0.0; n];
    // Σₘ P[m][n] yₘ per column
    let mut py = vec![Vector3::zeros(); n];
    for (j, col) in p.column_iter().enumerate() {
        let mut s = 0.0;
        let mut acc = Vector3::zeros();
        for (i, &v) in col.iter().enumerate() {
            s += v;
            p1[i] += v;
            acc += y.points[i] * v;
        }
        pt1[j] = s;
        py[j] = acc;
    }
    let np: f64 = pt1.iter().sum();
    if !(np > 0.0) {
        return Err(Error::NoCorrespondenceMass);
    }
    let mu_x = x.points.iter().zip(&pt1).map(|(xn, w)| xn * *w).sum::<Vector3<f64>>() / np;
    let mu_y = y.points.iter().zip(&p1).map(|(ym, w)| ym * *w).sum::<Vector3<f64>>() / np;

    // A = X̂ᵀ Pᵀ Ŷ = Σₙ (xₙ − μx)(Σₘ P[m][n] yₘ − Pt1ₙ μy)ᵀ
    let mut a = Matrix3::zeros();
    let mut x_var = 0.0;
    for j in 0..n {
        let xc = x.points[j] - mu_x;
        a += xc * (py[j] - mu_y * pt1[j]).transpose();
        x_var += pt1[j] * xc.norm_squared();
    }
    let y_var: f64 = y.points.iter().zip(&p1).map(|(ym, w)| w * (ym - mu_y).norm_squared()).sum();

    let svd = a.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::invalid("m-step", "SVD failed"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("m-step", "SVD failed"))?;
    let det = (u * v_t).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let rotation = u * correction * v_t;
    let tr_ar = (a.transpose() * rotation).trace();

    let (scale, sigma2) = if estimate_scale {
        if !(y_var > 0.0) {
            return Err(Error::DegeneratePointSet);
        }
        let s = tr_ar / y_var;
        (s, (x_var - s * tr_ar) / (np * D))
    } else {
        (1.0, (x_var - 2.0 * tr_ar + y_var) / (np * D))
    };
    if !(scale > 0.0) {
        return Err(Error::DegeneratePointSet);
    }
    let translation = mu_x - scale * (rotation * mu_y);
    let transform = SimilarityTransform::new(orthonormalize(&rotation), scale, translation)?;
    Ok((transform, sigma2.max(SIGMA2_FLOOR)))
}

/// Re-projects a near-rotation onto SO(3) to shed accumulated rounding.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => {
            let d = (u * v_t).determinant().signum();
            u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
        }
        _ => *r,
    }
}

/// Registers `source` (moving) onto `target`.
pub fn register(target: &PointSet, source: &PointSet, config: &CpdConfig) -> Result<RegistrationResult> {
    config.validate()?;
    let target = target.subsample(config.max_points, config.rng_seed);
    let source = source.subsample(config.max_points, config.rng_seed.wrapping_add(1));
    let (x, x_norm) = normalize_pointset(&target)?;
    let (y, y_norm) = normalize_pointset(&source)?;

    let mut transform = SimilarityTransform::identity();
    let mut sigma2 = init_sigma2(&x, &y)?.max(SIGMA2_FLOOR);
    let mut history = vec![sigma2];
    let mut p = DMatrix::zeros(y.len(), x.len());
    let mut iterations = 0;
    let mut converged = false;
    let mut mass = 0.0;
    while iterations < config.max_iterations {
        let ty: Vec<Vector3<f64>> = y.points.iter().map(|q| transform.apply(q)).collect();
        fill_posterior(&x.points, &ty, sigma2, config.outlier_weight, &mut p);
        mass = p.sum();
        let (next, next_sigma2) = m_step(&x, &y, &p, config.estimate_scale)?;
        iterations += 1;
        let change = (next_sigma2 - sigma2).abs() / sigma2;
        transform = next;
        sigma2 = next_sigma2;
        history.push(sigma2);
        if change < config.sigma2_tolerance {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        transform,
        sigma: sigma2.sqrt(),
        iterations,
        converged,
        correspondence_mass: mass,
        target_normalization: Some(x_norm),
        source_normalization: Some(y_norm),
        sigma2_history: history,
    })
}
