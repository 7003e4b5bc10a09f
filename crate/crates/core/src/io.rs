//! File codecs: ASCII PLY meshes and clouds, 16-bit PGM frames, raw float
//! rasters with a JSON header, pose sequences and candidate-patch sets.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cpd::{PointSet, RegistrationResult};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidPose};
use crate::image::GrayImage;
use crate::matching::CandidatePatch;
use crate::mesh::TriangleMesh;

pub const POSE_CONVENTION: &str = "camera_to_world";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- PLY

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    /// Scalar property names; `None` marks a list property.
    properties: Vec<Option<String>>,
}

struct PlyReader {
    path: PathBuf,
    elements: Vec<PlyElement>,
    lines: std::io::Lines<BufReader<fs::File>>,
}

impl PlyReader {
    fn open(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |r: &str| Error::format(path, r);
        let next = |lines: &mut std::io::Lines<BufReader<fs::File>>| -> Result<String> {
            match lines.next() {
                Some(l) => l.map_err(|e| Error::io(path, e)),
                None => Err(bad("unexpected end of header")),
            }
        };
        if next(&mut lines)?.trim() != "ply" {
            return Err(bad("missing ply magic"));
        }
        let mut elements: Vec<PlyElement> = Vec::new();
        let mut ascii = false;
        loop {
            let line = next(&mut lines)?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["end_header"] => break,
                ["format", "ascii", _] => ascii = true,
                ["format", ..] => return Err(bad("only ascii PLY is supported")),
                ["comment", ..] | ["obj_info", ..] | [] => {}
                ["element", name, count] => elements.push(PlyElement {
                    name: name.to_string(),
                    count: count.parse().map_err(|_| bad("bad element count"))?,
                    properties: Vec::new(),
                }),
                ["property", "list", _, _, _] => elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?
                    .properties
                    .push(None),
                ["property", _, name] => elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?
                    .properties
                    .push(Some(name.to_string())),
                _ => return Err(bad(&format!("unrecognized header line `{line}`"))),
            }
        }
        if !ascii {
            return Err(bad("missing format line"));
        }
        Ok(PlyReader {
            path: path.to_path_buf(),
            elements,
            lines,
        })
    }

    fn line(&mut self) -> Result<String> {
        match self.lines.next() {
            Some(l) => l.map_err(|e| Error::io(&self.path, e)),
            None => Err(Error::format(&self.path, "unexpected end of data")),
        }
    }

    fn number(&self, tok: Option<&str>) -> Result<f64> {
        tok.and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| Error::format(&self.path, "malformed number"))
    }

    /// Reads every element; scalar rows keyed by property, list rows kept raw.
    fn read_all(mut self) -> Result<Vec<(PlyElement, Vec<Vec<f64>>)>> {
        let elements = std::mem::take(&mut self.elements);
        let mut out = Vec::new();
        for el in elements {
            let mut rows = Vec::with_capacity(el.count);
            for _ in 0..el.count {
                let line = self.line()?;
                let mut tok = line.split_whitespace();
                let mut row = Vec::new();
                for p in &el.properties {
                    match p {
                        Some(_) => row.push(self.number(tok.next())?),
                        None => {
                            let n = self.number(tok.next())?;
                            if n < 0.0 || n.fract() != 0.0 {
                                return Err(Error::format(&self.path, "bad list length"));
                            }
                            row.push(n);
                            for _ in 0..n as usize {
                                row.push(self.number(tok.next())?);
                            }
                        }
                    }
                }
                if tok.next().is_some() {
                    return Err(Error::format(&self.path, "trailing values in row"));
                }
                rows.push(row);
            }
            out.push((el, rows));
        }
        Ok(out)
    }
}

fn column(el: &PlyElement, name: &str) -> Option<usize> {
    // list properties only appear last in the formats read here
    el.properties.iter().position(|p| p.as_deref() == Some(name))
}

fn xyz(path: &Path, el: &PlyElement, rows: &[Vec<f64>]) -> Result<Vec<Vector3<f64>>> {
    let (ix, iy, iz) = match (column(el, "x"), column(el, "y"), column(el, "z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::format(path, "vertex element lacks x, y or z")),
    };
    let pts: Vec<Vector3<f64>> = rows.iter().map(|r| Vector3::new(r[ix], r[iy], r[iz])).collect();
    if pts.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::format(path, "non-finite coordinate"));
    }
    Ok(pts)
}

/// Vertices with normals and gray albedo, plus triangle faces.
pub fn write_mesh_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = BufWriter::new(&mut buf);
        let header = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
             property double nx\nproperty double ny\nproperty double nz\nproperty double albedo\n\
             element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            mesh.vertices.len(),
            mesh.triangles.len()
        );
        w.write_all(header.as_bytes()).expect("write to memory");
        for ((v, n), a) in mesh.vertices.iter().zip(&mesh.normals).zip(&mesh.albedo) {
            writeln!(w, "{} {} {} {} {} {} {}", v.x, v.y, v.z, n.x, n.y, n.z, a).expect("write to memory");
        }
        for t in &mesh.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2]).expect("write to memory");
        }
    }
    write_bytes(path, &buf)
}

pub fn read_mesh_ply(path: &Path) -> Result<TriangleMesh> {
    let elements = PlyReader::open(path)?.read_all()?;
    let (vel, vrows) = elements
        .iter()
        .find(|(e, _)| e.name == "vertex")
        .ok_or_else(|| Error::format(path, "no vertex element"))?;
    let vertices = xyz(path, vel, vrows)?;
    let mut triangles = Vec::new();
    if let Some((fel, frows)) = elements.iter().find(|(e, _)| e.name == "face") {
        if fel.properties.len() != 1 || fel.properties[0].is_some() {
            return Err(Error::format(path, "face element must hold one index list"));
        }
        for r in frows {
            if r.len() != 4 || r[0] != 3.0 {
                return Err(Error::format(path, "only triangle faces are supported"));
            }
            triangles.push([r[1] as u32, r[2] as u32, r[3] as u32]);
        }
    }
    let albedo_col = column(vel, "albedo");
    let normal_cols = (column(vel, "nx"), column(vel, "ny"), column(vel, "nz"));
    let mut mesh = TriangleMesh::from_geometry(vertices, triangles, 0.5)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(c) = albedo_col {
        mesh.albedo = vrows.iter().map(|r| r[c]).collect();
    }
    if let (Some(a), Some(b), Some(c)) = normal_cols {
        mesh.normals = vrows.iter().map(|r| Vector3::new(r[a], r[b], r[c])).collect();
    }
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

/// `x y z` and, when present, `confidence` per point.
pub fn write_points_ply(path: &Path, points: &PointSet) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = BufWriter::new(&mut buf);
        let conf = points.confidence();
        write!(
            w,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
            points.len()
        )
        .expect("write to memory");
        if conf.is_some() {
            writeln!(w, "property double confidence").expect("write to memory");
        }
        writeln!(w, "end_header").expect("write to memory");
        for (i, p) in points.points().iter().enumerate() {
            match conf {
                Some(c) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, c[i]),
                None => writeln!(w, "{} {} {}", p.x, p.y, p.z),
            }
            .expect("write to memory");
        }
    }
    write_bytes(path, &buf)
}

/// Reads the vertex element of any ASCII PLY; faces are ignored.
pub fn read_points_ply(path: &Path) -> Result<PointSet> {
    let elements = PlyReader::open(path)?.read_all()?;
    let (vel, vrows) = elements
        .iter()
        .find(|(e, _)| e.name == "vertex")
        .ok_or_else(|| Error::format(path, "no vertex element"))?;
    let pts = xyz(path, vel, vrows)?;
    match column(vel, "confidence") {
        Some(c) => PointSet::with_confidence(pts, vrows.iter().map(|r| r[c]).collect()),
        None => PointSet::new(pts),
    }
    .map_err(|e| Error::format(path, e.to_string()))
}

// ---------------------------------------------------------------- PGM

/// Binary 16-bit graymap; intensities in `[0, 1]` map to `0..=65535`.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
    out.reserve(image.data().len() * 2);
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(image))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|r| Error::format(path, r))
}

/// Accepts 8- and 16-bit P5 data.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5 magic, found `{}`", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err("bad image dimensions or maxval".into());
    }
    pos += 1;
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    let data = bytes.get(pos..).filter(|d| d.len() == need).ok_or_else(|| {
        format!(
            "expected {need} data bytes, found {}",
            bytes.len().saturating_sub(pos)
        )
    })?;
    let m = maxval as f64;
    let values: Vec<f64> = if wide {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / m)
            .collect()
    } else {
        data.iter().map(|&b| b as f64 / m).collect()
    };
    if values.iter().any(|&v| v > 1.0) {
        return Err("sample exceeds maxval".into());
    }
    GrayImage::from_vec(w, h, values).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- rasters

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    Float32,
    Float64,
}

/// Sidecar header of a raw little-endian raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub dtype: SampleType,
    pub byte_order: String,
    /// Raw data file name, relative to the header.
    pub data: String,
    /// What the samples mean, e.g. `range_mm`.
    pub quantity: String,
}

/// Writes `<stem>.f32` (or `.f64`) and `<stem>.json`.
pub fn write_raster(stem: &Path, image: &GrayImage, dtype: SampleType, quantity: &str) -> Result<PathBuf> {
    let ext = match dtype {
        SampleType::Float32 => "f32",
        SampleType::Float64 => "f64",
    };
    let data_path = stem.with_extension(ext);
    let mut bytes = Vec::with_capacity(image.data().len() * 8);
    for &v in image.data() {
        match dtype {
            SampleType::Float32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            SampleType::Float64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    write_bytes(&data_path, &bytes)?;
    let header = RasterHeader {
        width: image.width(),
        height: image.height(),
        dtype,
        byte_order: "little".into(),
        data: data_path.file_name().unwrap().to_string_lossy().into_owned(),
        quantity: quantity.into(),
    };
    let header_path = stem.with_extension("json");
    write_json(&header_path, &header)?;
    Ok(header_path)
}

/// Reads a raster through its JSON header.
pub fn read_raster(header_path: &Path) -> Result<(GrayImage, RasterHeader)> {
    let header: RasterHeader = read_json(header_path)?;
    if header.byte_order != "little" {
        return Err(Error::format(header_path, "only little-endian rasters are supported"));
    }
    let data_path = header_path.parent().unwrap_or(Path::new("")).join(&header.data);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let width = match header.dtype {
        SampleType::Float32 => 4,
        SampleType::Float64 => 8,
    };
    if bytes.len() != header.width * header.height * width {
        return Err(Error::format(
            &data_path,
            format!("expected {} bytes, found {}", header.width * header.height * width, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(width)
        .map(|c| match header.dtype {
            SampleType::Float32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            SampleType::Float64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(&data_path, "non-finite sample"));
    }
    let image = GrayImage::from_vec(header.width, header.height, values).map_err(|e| Error::format(&data_path, e.to_string()))?;
    Ok((image, header))
}

// ---------------------------------------------------------------- poses

/// One frame of a pose file: either `rotation` (9 row-major numbers) or a
/// unit `quaternion` `[w, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quaternion: Option<[f64; 4]>,
    pub translation: [f64; 3],
    /// Image file of this frame, relative to the pose file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub camera: CameraModel,
    #[serde(default = "default_convention")]
    pub convention: String,
    pub frames: Vec<PoseEntry>,
}

fn default_convention() -> String {
    POSE_CONVENTION.into()
}

impl PoseEntry {
    pub fn from_pose(id: u32, pose: &RigidPose, image: Option<String>) -> Self {
        let r = pose.rotation();
        let t = pose.translation();
        PoseEntry {
            id,
            rotation: Some(crate::geometry::row_major(r)),
            quaternion: None,
            translation: [t.x, t.y, t.z],
            image,
        }
    }

    pub fn pose(&self) -> Result<RigidPose> {
        let rotation = match (self.rotation, self.quaternion) {
            (Some(r), None) => Matrix3::from_row_slice(&r),
            (None, Some([w, x, y, z])) => {
                let q = Quaternion::new(w, x, y, z);
                if (q.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid("pose", format!("frame {}: quaternion is not unit length", self.id)));
                }
                *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
            }
            _ => {
                return Err(Error::invalid(
                    "pose",
                    format!("frame {}: give exactly one of rotation or quaternion", self.id),
                ))
            }
        };
        RigidPose::new(rotation, Vector3::from(self.translation))
            .map_err(|e| Error::invalid("pose", format!("frame {}: {e}", self.id)))
    }
}

impl PoseFile {
    pub fn poses(&self) -> Result<Vec<RigidPose>> {
        self.frames.iter().map(PoseEntry::pose).collect()
    }
}

pub fn read_pose_file(path: &Path) -> Result<PoseFile> {
    let file: PoseFile = read_json(path)?;
    if file.convention != POSE_CONVENTION {
        return Err(Error::format(
            path,
            format!("unsupported pose convention `{}`, expected `{POSE_CONVENTION}`", file.convention),
        ));
    }
    file.camera.validate().map_err(|e| Error::format(path, e.to_string()))?;
    file.poses().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(file)
}

// ---------------------------------------------------------------- candidates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub id: usize,
    pub label: String,
    pub center: [f64; 3],
    pub centerline_position: f64,
    /// Point file, relative to the manifest.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateManifest {
    pub patch_radius: f64,
    pub candidates: Vec<CandidateRecord>,
}

pub const CANDIDATE_MANIFEST: &str = "manifest.json";

/// Writes one PLY per patch plus `manifest.json` into `dir`.
pub fn write_candidates(dir: &Path, patches: &[CandidatePatch], patch_radius: f64) -> Result<()> {
    let mut records = Vec::with_capacity(patches.len());
    for p in patches {
        let file = format!("patch_{:04}.ply", p.id);
        write_points_ply(&dir.join(&file), &p.points)?;
        records.push(CandidateRecord {
            id: p.id,
            label: p.label.clone(),
            center: [p.center.x, p.center.y, p.center.z],
            centerline_position: p.centerline_position,
            file,
        });
    }
    write_json(
        &dir.join(CANDIDATE_MANIFEST),
        &CandidateManifest {
            patch_radius,
            candidates: records,
        },
    )
}

pub fn read_candidates(dir: &Path) -> Result<Vec<CandidatePatch>> {
    let manifest_path = dir.join(CANDIDATE_MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::format(dir, "no candidate manifest"));
    }
    let manifest: CandidateManifest = read_json(&manifest_path)?;
    if manifest.candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    manifest
        .candidates
        .iter()
        .map(|r| {
            if !(r.label == crate::matching::FOLD_LABEL || r.label.starts_with("polyp-")) {
                return Err(Error::format(&manifest_path, format!("unknown label `{}`", r.label)));
            }
            Ok(CandidatePatch {
                id: r.id,
                label: r.label.clone(),
                center: Vector3::from(r.center),
                points: read_points_ply(&dir.join(&r.file))?,
                centerline_position: r.centerline_position,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- registration

/// Flat registration record: transform, σ and convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub rotation: [f64; 9],
    pub scale: f64,
    pub translation: [f64; 3],
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&RegistrationResult> for RegistrationRecord {
    fn from(r: &RegistrationResult) -> Self {
        let t = r.transform.translation();
        RegistrationRecord {
            rotation: crate::geometry::row_major(r.transform.rotation()),
            scale: r.transform.scale(),
            translation: [t.x, t.y, t.z],
            sigma: r.sigma,
            iterations: r.iterations,
            converged: r.converged,
        }
    }
}
