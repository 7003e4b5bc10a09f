//! Pinhole cameras, rigid and similarity transforms, and plane-induced homographies.
//!
//! World space is in millimeters. A [`RigidPose`] maps camera-frame points to
//! world-frame points (`X_world = R * X_cam + t`), so its translation is the
//! camera center.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROTATION_TOLERANCE: f64 = 1e-9;

/// Pinhole intrinsics. Pixel centers sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        CameraModel {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "image size must be non-zero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("camera", "principal point outside the image"));
        }
        Ok(())
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera-frame point at z-depth `depth` seen through pixel `(u, v)`.
    pub fn backproject(&self, pixel: Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Unit-length viewing ray through a pixel, in the camera frame.
    pub fn ray_direction(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        self.backproject(pixel, 1.0).normalize()
    }

    /// Intrinsics for an image downsampled by 2 with 2x2 box averaging.
    pub fn half_size(&self) -> CameraModel {
        CameraModel {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: (self.cx + 0.5) / 2.0 - 0.5,
            cy: (self.cy + 0.5) / 2.0 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel::centered(120.0, 192, 144)
    }
}

/// Pinhole projection of a camera-frame point. No clamping to image bounds.
pub fn project(camera: &CameraModel, point_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
    if !(point_cam.z > 0.0) {
        return Err(Error::BehindCamera(point_cam.z));
    }
    Ok(Vector2::new(
        camera.fx * point_cam.x / point_cam.z + camera.cx,
        camera.fy * point_cam.y / point_cam.z + camera.cy,
    ))
}

/// Checks orthonormality and `det = +1` within 1e-9.
pub fn is_rotation(r: &Matrix3<f64>) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho <= ROTATION_TOLERANCE && (r.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
}

fn checked_rotation(r: Matrix3<f64>, what: &'static str) -> Result<Matrix3<f64>> {
    if r.iter().all(|v| v.is_finite()) && is_rotation(&r) {
        Ok(r)
    } else {
        Err(Error::invalid(what, "rotation is not orthonormal with det +1"))
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Ok(RigidPose {
            rotation: checked_rotation(rotation, "pose")?,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidPose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Camera at `eye` with its optical axis through `target`. The image x axis
    /// follows `right_hint` projected orthogonally to the optical axis.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, right_hint: Vector3<f64>) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("pose", "eye and target coincide"))?;
        let x = (right_hint - z * right_hint.dot(&z))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("pose", "right hint parallel to viewing direction"))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        RigidPose::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn to_world(&self, point_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point_cam + self.translation
    }

    pub fn to_camera(&self, point_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point_world - self.translation)
    }

    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidPose {
        invert(self)
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &RigidPose, b: &RigidPose) -> RigidPose {
    RigidPose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(a: &RigidPose) -> RigidPose {
    let rt = a.rotation.transpose();
    RigidPose {
        rotation: rt,
        translation: -(rt * a.translation),
    }
}

/// Serialized pose: row-major rotation and translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<RigidPose> for PoseRecord {
    fn from(p: RigidPose) -> Self {
        PoseRecord {
            rotation: row_major(&p.rotation),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRecord> for RigidPose {
    type Error = Error;
    fn try_from(r: PoseRecord) -> Result<Self> {
        RigidPose::new(Matrix3::from_row_slice(&r.rotation), Vector3::from(r.translation))
    }
}

pub(crate) fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

/// `x ↦ scale * R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SimilarityRecord", into = "SimilarityRecord")]
pub struct SimilarityTransform {
    rotation: Matrix3<f64>,
    scale: f64,
    translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn new(rotation: Matrix3<f64>, scale: f64, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("similarity transform", "scale must be positive"));
        }
        Ok(SimilarityTransform {
            rotation: checked_rotation(rotation, "similarity transform")?,
            scale,
            translation,
        })
    }

    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        apply(self, p)
    }
}

pub fn apply(t: &SimilarityTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.scale * (t.rotation * p) + t.translation
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SimilarityRecord {
    pub rotation: [f64; 9],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl From<SimilarityTransform> for SimilarityRecord {
    fn from(t: SimilarityTransform) -> Self {
        SimilarityRecord {
            rotation: row_major(&t.rotation),
            scale: t.scale,
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<SimilarityRecord> for SimilarityTransform {
    type Error = Error;
    fn try_from(r: SimilarityRecord) -> Result<Self> {
        SimilarityTransform::new(
            Matrix3::from_row_slice(&r.rotation),
            r.scale,
            Vector3::from(r.translation),
        )
    }
}

/// The plane `normal · X + offset = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane3 {
    normal: Vector3<f64>,
    offset: f64,
}

impl Plane3 {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self> {
        let n = normal
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("plane", "zero normal"))?;
        Ok(Plane3 { normal: n, offset })
    }

    /// Plane orthogonal to the camera's optical axis at z-depth `depth`.
    pub fn fronto_parallel(pose: &RigidPose, depth: f64) -> Plane3 {
        let normal = pose.rotation.column(2).into_owned();
        Plane3 {
            normal,
            offset: -(normal.dot(&pose.translation) + depth),
        }
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

/// Homography taking reference-view pixels to pixels of `other` for points on `plane`.
///
/// With the plane written in the reference camera frame as `n_r · X + d_r = 0`
/// and `X_o = R_rel X_r + t_rel`, the transfer is `K_o (R_rel - t_rel n_rᵀ / d_r) K_r⁻¹`.
pub fn plane_homography(
    reference: (&CameraModel, &RigidPose),
    other: (&CameraModel, &RigidPose),
    plane: &Plane3,
) -> Result<Matrix3<f64>> {
    let (ref_cam, ref_pose) = reference;
    let (other_cam, other_pose) = other;
    let d_ref = plane.signed_distance(&ref_pose.translation);
    let d_other = plane.signed_distance(&other_pose.translation);
    if d_ref.abs() <= 1e-9 || d_other.abs() <= 1e-9 {
        return Err(Error::PlaneThroughCameraCenter);
    }
    let n_ref = ref_pose.rotation.transpose() * plane.normal;
    let other_rt = other_pose.rotation.transpose();
    let r_rel = other_rt * ref_pose.rotation;
    let t_rel = other_rt * (ref_pose.translation - other_pose.translation);
    let euclidean = r_rel - t_rel * n_ref.transpose() / d_ref;
    Ok(other_cam.intrinsic_matrix() * euclidean * ref_cam.inverse_intrinsic_matrix())
}

/// Applies a homography to a pixel; `None` when the point maps to infinity or behind.
#[inline]
pub fn transfer(h: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let w = h[(2, 0)] * x + h[(2, 1)] * y + h[(2, 2)];
    if !(w > 0.0) {
        return None;
    }
    let u = (h[(0, 0)] * x + h[(0, 1)] * y + h[(0, 2)]) / w;
    let v = (h[(1, 0)] * x + h[(1, 1)] * y + h[(1, 2)]) / w;
    Some((u, v))
}

/// Rotation of `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let skew = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + skew * angle.sin() + skew * skew * (1.0 - angle.cos())
}

/// Angle of a rotation matrix in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}
