//! Experiment stages bound to files: phantom, render, reconstruct, register,
//! match, and the end-to-end sequence of all of them.
//!
//! Every stage reads its inputs from and writes its outputs to the output
//! directory, so stages can be run separately or chained.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::cpd::{register, CpdConfig, PointSet};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidPose};
use crate::image::GrayImage;
use crate::io::{self, PoseEntry, PoseFile, RegistrationRecord, SampleType};
use crate::matching::{match_all, profile_csv, report_csv, sigma_profile, CandidatePatch, MatchReport};
use crate::mesh::TriangleMesh;
use crate::phantom::{build_phantom_mesh, paint_texture, sample_candidate_patches, PhantomSpec, PhantomSurface, PolypSite};
use crate::render::{orbit_poses, HeadlightModel, OrbitSpec, RenderedFrame, Scene};
use crate::sweep::{depth_to_pointcloud, reconstruct_depth, DepthMap, Frame, SweepConfig, ViewSet, MAX_VIEWS};

pub const PHANTOM_MESH: &str = "phantom.ply";
pub const PHANTOM_MANIFEST: &str = "phantom_manifest.json";
pub const CANDIDATE_DIR: &str = "candidates";
pub const FRAME_DIR: &str = "frames";
pub const POSES_FILE: &str = "poses.json";
pub const CLOUD_FILE: &str = "cloud.ply";
pub const SOURCE_FILE: &str = "source.ply";
pub const REFERENCE_DEPTH: &str = "reference_depth";
pub const REGISTRATION_FILE: &str = "registration.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PROFILE_CSV: &str = "profile.csv";

/// Per-stage seeds derived from one global seed by fixed offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub phantom: u64,
    pub texture: u64,
    pub cpd: u64,
}

impl Seeds {
    pub fn from_global(seed: u64) -> Self {
        Seeds {
            phantom: seed,
            texture: seed.wrapping_add(1),
            cpd: seed.wrapping_add(2),
        }
    }
}

/// Camera path for the render stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// Arc around one of the phantom's polyps.
    Orbit(OrbitSpec),
    Poses(Vec<RigidPose>),
    /// Pose JSON file; its camera block is ignored in favour of the config's.
    PoseFile(PathBuf),
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory::Orbit(OrbitSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub count: usize,
    /// Euclidean patch radius, mm.
    pub patch_radius: f64,
    /// Ground-truth label for σ normalization. When unset, the label of the
    /// orbited polyp is used.
    pub reference_label: Option<String>,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            count: 370,
            patch_radius: 10.0,
            reference_label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub phantom: PhantomSpec,
    pub camera: CameraModel,
    pub trajectory: Trajectory,
    pub light: HeadlightModel,
    pub sweep: SweepConfig,
    pub cpd: CpdConfig,
    pub candidates: CandidateConfig,
    /// Radius (mm) of the region of the reconstruction kept for matching,
    /// centred where the reference optical axis meets the surface. `null`
    /// keeps the whole cloud.
    pub source_crop_radius: Option<f64>,
    /// Maximum number of views used for reconstruction.
    pub views: usize,
    pub resize_half: bool,
    pub output_dir: PathBuf,
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            phantom: PhantomSpec::default(),
            camera: CameraModel::default(),
            trajectory: Trajectory::default(),
            light: HeadlightModel::default(),
            sweep: SweepConfig::default(),
            cpd: CpdConfig::default(),
            candidates: CandidateConfig::default(),
            source_crop_radius: Some(8.0),
            views: 16,
            resize_half: false,
            output_dir: PathBuf::from("out"),
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = io::read_json(path)?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.camera.validate()?;
        self.sweep.validate()?;
        self.cpd.validate()?;
        if !(2..=MAX_VIEWS).contains(&self.views) {
            return Err(Error::invalid("pipeline config", format!("views must be in 2..={MAX_VIEWS}")));
        }
        if self.candidates.count == 0 || !(self.candidates.patch_radius > 0.0) {
            return Err(Error::invalid("pipeline config", "candidates need count >= 1 and a positive radius"));
        }
        if let Some(r) = self.source_crop_radius {
            if !(r > 0.0) {
                return Err(Error::invalid("pipeline config", "source_crop_radius must be positive"));
            }
        }
        if let Trajectory::Orbit(o) = &self.trajectory {
            if o.polyp >= self.phantom.polyps.len() {
                return Err(Error::invalid("trajectory", format!("orbit polyp {} does not exist", o.polyp)));
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_global(self.rng_seed)
    }

    /// The phantom spec with its seeds replaced by the global fan-out.
    pub fn effective_phantom(&self) -> PhantomSpec {
        let seeds = self.seeds();
        PhantomSpec {
            rng_seed: seeds.phantom,
            texture_seed: seeds.texture,
            ..self.phantom.clone()
        }
    }

    pub fn effective_cpd(&self) -> CpdConfig {
        CpdConfig {
            rng_seed: self.seeds().cpd,
            ..self.cpd.clone()
        }
    }

    pub fn reference_label(&self) -> Option<String> {
        if let Some(l) = &self.candidates.reference_label {
            return Some(l.clone());
        }
        match &self.trajectory {
            Trajectory::Orbit(o) => self.phantom.polyps.get(o.polyp).map(|p| p.label()),
            _ => None,
        }
    }
}

/// Describes the phantom written next to its mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub spec: PhantomSpec,
    pub mesh: String,
    pub vertex_count: usize,
    pub triangle_count: usize,
    pub polyps: Vec<PolypSite>,
    pub candidates: String,
    pub candidate_count: usize,
}

pub struct PhantomOutputs {
    pub mesh: TriangleMesh,
    pub manifest: PhantomManifest,
    pub candidates: Vec<CandidatePatch>,
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    log::info!("{stage}: {:.2} s", start.elapsed().as_secs_f64());
    out
}

/// Builds and textures the phantom and extracts candidate patches.
pub fn build_phantom(cfg: &PipelineConfig) -> Result<PhantomOutputs> {
    let spec = cfg.effective_phantom();
    let mesh = paint_texture(&build_phantom_mesh(&spec)?, spec.texture_seed);
    let polyps = PhantomSurface::new(&spec)?.polyp_sites();
    let candidates = sample_candidate_patches(&mesh, &spec, cfg.candidates.count, cfg.candidates.patch_radius)?;
    let manifest = PhantomManifest {
        vertex_count: mesh.vertices.len(),
        triangle_count: mesh.triangles.len(),
        spec,
        mesh: PHANTOM_MESH.into(),
        polyps,
        candidates: CANDIDATE_DIR.into(),
        candidate_count: candidates.len(),
    };
    Ok(PhantomOutputs {
        mesh,
        manifest,
        candidates,
    })
}

/// Writes `phantom.ply`, `phantom_manifest.json` and `candidates/`.
pub fn stage_phantom(cfg: &PipelineConfig, out: &Path) -> Result<PhantomOutputs> {
    timed("phantom", || {
        let built = build_phantom(cfg)?;
        io::write_mesh_ply(&out.join(PHANTOM_MESH), &built.mesh)?;
        io::write_candidates(&out.join(CANDIDATE_DIR), &built.candidates, cfg.candidates.patch_radius)?;
        io::write_json(&out.join(PHANTOM_MANIFEST), &built.manifest)?;
        Ok(built)
    })
}

/// Camera poses of the configured trajectory.
pub fn trajectory_poses(cfg: &PipelineConfig, polyps: &[PolypSite]) -> Result<Vec<RigidPose>> {
    match &cfg.trajectory {
        Trajectory::Orbit(o) => {
            let site = polyps
                .get(o.polyp)
                .ok_or_else(|| Error::invalid("trajectory", format!("orbit polyp {} does not exist", o.polyp)))?;
            orbit_poses(&site.apex, &site.inward_normal, &site.axis, o.standoff, o.arc_degrees, o.count)
        }
        Trajectory::Poses(p) => Ok(p.clone()),
        Trajectory::PoseFile(path) => io::read_pose_file(path)?.poses(),
    }
}

pub fn frame_name(id: u32) -> String {
    format!("frame_{id:03}.pgm")
}

pub fn depth_stem(id: u32) -> String {
    format!("depth_{id:03}")
}

/// Renders the trajectory from `phantom.ply` into `frames/`.
pub fn stage_render(cfg: &PipelineConfig, out: &Path) -> Result<Vec<RenderedFrame>> {
    timed("render", || {
        let manifest: PhantomManifest = io::read_json(&out.join(PHANTOM_MANIFEST))?;
        let mesh = io::read_mesh_ply(&out.join(&manifest.mesh))?;
        let poses = trajectory_poses(cfg, &manifest.polyps)?;
        let frames = Scene::new(mesh)?.render_views(&cfg.camera, &poses, &cfg.light)?;
        let dir = out.join(FRAME_DIR);
        let mut entries = Vec::with_capacity(frames.len());
        for f in &frames {
            let name = frame_name(f.frame_id);
            io::write_pgm(&dir.join(&name), &f.image)?;
            io::write_raster(&dir.join(depth_stem(f.frame_id)), &f.depth, SampleType::Float32, "range_mm")?;
            entries.push(PoseEntry::from_pose(f.frame_id, &f.pose, Some(name)));
        }
        io::write_json(
            &dir.join(POSES_FILE),
            &PoseFile {
                camera: cfg.camera,
                convention: io::POSE_CONVENTION.into(),
                frames: entries,
            },
        )?;
        Ok(frames)
    })
}

/// Reads posed frames listed in a pose file; images are resolved relative to it.
pub fn load_frames(poses_path: &Path) -> Result<(CameraModel, Vec<Frame>)> {
    let file = io::read_pose_file(poses_path)?;
    let dir = poses_path.parent().unwrap_or(Path::new(""));
    let poses = file.poses()?;
    let mut frames = Vec::with_capacity(poses.len());
    for (entry, pose) in file.frames.iter().zip(poses) {
        let name = entry
            .image
            .as_ref()
            .ok_or_else(|| Error::format(poses_path, format!("frame {} has no image", entry.id)))?;
        let image = io::read_pgm(&dir.join(name))?;
        if image.width() != file.camera.width || image.height() != file.camera.height {
            return Err(Error::format(dir.join(name), "image size does not match the camera"));
        }
        frames.push(Frame {
            image,
            pose,
            id: entry.id,
        });
    }
    Ok((file.camera, frames))
}

/// Evenly spaced subset of at most `max` frames, keeping both ends.
pub fn select_views(frames: Vec<Frame>, max: usize) -> Vec<Frame> {
    let n = frames.len();
    if n <= max || max < 2 {
        return frames;
    }
    let keep: Vec<usize> = (0..max).map(|i| (i * (n - 1) + (max - 1) / 2) / (max - 1)).collect();
    frames
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, f)| f)
        .collect()
}

pub struct Reconstruction {
    pub camera: CameraModel,
    pub views: ViewSet,
    pub depth: DepthMap,
    pub cloud: PointSet,
    pub source: PointSet,
}

/// Surface point hit by the reference optical axis, from the median depth of
/// the smallest window around the principal point holding a valid depth.
pub fn optical_axis_anchor(depth: &DepthMap, camera: &CameraModel, pose: &RigidPose) -> Option<nalgebra::Vector3<f64>> {
    let (cx, cy) = (camera.cx.round() as isize, camera.cy.round() as isize);
    let mut r = 3isize;
    while r <= depth.width().max(depth.height()) as isize {
        let mut zs: Vec<f64> = Vec::new();
        for y in (cy - r).max(0)..=(cy + r).min(depth.height() as isize - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(depth.width() as isize - 1) {
                let z = depth.depth(x as usize, y as usize);
                if z > 0.0 {
                    zs.push(z);
                }
            }
        }
        if !zs.is_empty() {
            let mid = zs.len() / 2;
            let z = *zs.select_nth_unstable_by(mid, f64::total_cmp).1;
            return Some(pose.to_world(&camera.backproject(Vector2::new(camera.cx, camera.cy), z)));
        }
        r *= 2;
    }
    None
}

pub fn reconstruct_frames(cfg: &PipelineConfig, camera: CameraModel, frames: Vec<Frame>) -> Result<Reconstruction> {
    let mut frames = select_views(frames, cfg.views);
    let mut camera = camera;
    if cfg.resize_half {
        camera = camera.half_size();
        for f in &mut frames {
            f.image = f.image.half_size();
        }
    }
    let views = ViewSet::from_sequence(camera, frames)?;
    let depth = reconstruct_depth(&views, &cfg.sweep)?;
    let pose = views.reference().pose;
    let cloud = depth_to_pointcloud(&depth, &camera, &pose);
    let source = match (cfg.source_crop_radius, optical_axis_anchor(&depth, &camera, &pose)) {
        (Some(r), Some(anchor)) => cloud.crop_sphere(&anchor, r),
        _ => cloud.clone(),
    };
    log::info!(
        "reconstruction: {} views, {} points, {} in source region",
        views.len(),
        cloud.len(),
        source.len()
    );
    Ok(Reconstruction {
        camera,
        views,
        depth,
        cloud,
        source,
    })
}

/// Reconstructs from `frames/poses.json`, writing `cloud.ply`, `source.ply`
/// and the reference depth raster.
pub fn stage_reconstruct(cfg: &PipelineConfig, poses_path: &Path, out: &Path) -> Result<Reconstruction> {
    timed("reconstruct", || {
        let (camera, frames) = load_frames(poses_path)?;
        let rec = reconstruct_frames(cfg, camera, frames)?;
        io::write_points_ply(&out.join(CLOUD_FILE), &rec.cloud)?;
        io::write_points_ply(&out.join(SOURCE_FILE), &rec.source)?;
        let z = GrayImage::from_vec(rec.depth.width(), rec.depth.height(), rec.depth.depths().to_vec())?;
        io::write_raster(&out.join(REFERENCE_DEPTH), &z, SampleType::Float32, "z_depth_mm")?;
        Ok(rec)
    })
}

/// Registers `source` onto `target`, writing `registration.json`.
pub fn stage_register(cfg: &PipelineConfig, target: &Path, source: &Path, out: &Path) -> Result<RegistrationRecord> {
    timed("register", || {
        let x = io::read_points_ply(target)?;
        let y = io::read_points_ply(source)?;
        let record = RegistrationRecord::from(&register(&x, &y, &cfg.effective_cpd())?);
        io::write_json(&out.join(REGISTRATION_FILE), &record)?;
        Ok(record)
    })
}

/// Matches `cloud` against every candidate in `candidate_dir`, writing the
/// JSON and CSV reports and the positional σ profile.
pub fn stage_match(cfg: &PipelineConfig, cloud: &Path, candidate_dir: &Path, out: &Path) -> Result<MatchReport> {
    timed("match", || {
        let source = io::read_points_ply(cloud)?;
        let candidates = io::read_candidates(candidate_dir)?;
        let reference = cfg.reference_label();
        let report = match_all(&source, &candidates, &cfg.effective_cpd(), reference.as_deref())?;
        write_report(&report, out)?;
        Ok(report)
    })
}

pub fn write_report(report: &MatchReport, out: &Path) -> Result<()> {
    io::write_json(&out.join(REPORT_JSON), report)?;
    io::write_bytes(&out.join(REPORT_CSV), report_csv(report).as_bytes())?;
    io::write_bytes(&out.join(PROFILE_CSV), profile_csv(&sigma_profile(report)).as_bytes())
}

/// Runs every stage in order; errors name the failing stage.
pub fn stage_e2e(cfg: &PipelineConfig, out: &Path) -> Result<MatchReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    stage_phantom(cfg, out).map_err(|e| e.in_stage("phantom"))?;
    stage_render(cfg, out).map_err(|e| e.in_stage("render"))?;
    let poses = out.join(FRAME_DIR).join(POSES_FILE);
    stage_reconstruct(cfg, &poses, out).map_err(|e| e.in_stage("reconstruct"))?;
    stage_match(cfg, &out.join(SOURCE_FILE), &out.join(CANDIDATE_DIR), out).map_err(|e| e.in_stage("match"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_fan_out() {
        let s = Seeds::from_global(10);
        assert_eq!((s.phantom, s.texture, s.cpd), (10, 11, 12));
        let cfg = PipelineConfig {
            rng_seed: 5,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.effective_phantom().texture_seed, 6);
        assert_eq!(cfg.effective_cpd().rng_seed, 7);
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.reference_label().as_deref(), Some("polyp-15"));
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"rng_seed": 3, "views": 8}"#).unwrap();
        assert_eq!(partial.views, 8);
        assert_eq!(partial.sweep, SweepConfig::default());
    }

    #[test]
    fn view_limits() {
        for views in [1, 33] {
            let cfg = PipelineConfig {
                views,
                ..PipelineConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"rng_sed": 3}"#).is_err());
    }

    #[test]
    fn view_selection_keeps_ends() {
        let frames: Vec<Frame> = (0..20)
            .map(|i| Frame {
                image: GrayImage::new(2, 2),
                pose: RigidPose::identity(),
                id: i,
            })
            .collect();
        let ids: Vec<u32> = select_views(frames.clone(), 5).iter().map(|f| f.id).collect();
        assert_eq!(ids.len(), 5);
        assert_eq!((ids[0], ids[4]), (0, 19));
        assert_eq!(select_views(frames, 32).len(), 20);
    }

    #[test]
    fn stage_errors_carry_names() {
        let e = Error::NoCandidates.in_stage("match");
        assert_eq!(e.to_string(), "stage match: no candidates to match");
        assert!(!e.is_numeric());
        assert!(Error::DegeneratePointSet.in_stage("match").is_numeric());
    }
}
