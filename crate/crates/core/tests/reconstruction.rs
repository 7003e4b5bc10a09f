mod common;

use std::sync::OnceLock;

use common::{depth_accuracy, lit_plane_accuracy};
use nalgebra::Vector2;
use ocmatch_core::pipeline::{build_phantom, reconstruct_frames, trajectory_poses, PhantomOutputs, PipelineConfig, Trajectory};
use ocmatch_core::render::{OrbitSpec, Scene};
use ocmatch_core::sweep::Frame;
use ocmatch_core::{
    build_phantom_mesh, depth_to_pointcloud, detect_specular_mask, project, HeadlightModel, PhantomSpec, RenderedFrame,
};

fn phantom() -> &'static PhantomOutputs {
    static P: OnceLock<PhantomOutputs> = OnceLock::new();
    P.get_or_init(|| {
        let cfg = PipelineConfig {
            candidates: ocmatch_core::pipeline::CandidateConfig {
                count: 2,
                ..Default::default()
            },
            ..PipelineConfig::default()
        };
        build_phantom(&cfg).unwrap()
    })
}

fn orbit_config(count: usize) -> PipelineConfig {
    PipelineConfig {
        trajectory: Trajectory::Orbit(OrbitSpec {
            count,
            ..OrbitSpec::default()
        }),
        views: count.min(32),
        ..PipelineConfig::default()
    }
}

fn render(cfg: &PipelineConfig, scene: &Scene) -> Vec<RenderedFrame> {
    let poses = trajectory_poses(cfg, &phantom().manifest.polyps).unwrap();
    scene.render_views(&cfg.camera, &poses, &cfg.light).unwrap()
}

fn as_frames(rendered: &[RenderedFrame]) -> Vec<Frame> {
    rendered
        .iter()
        .map(|f| Frame {
            image: f.image.clone(),
            pose: f.pose,
            id: f.frame_id,
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

#[test]
fn lit_textured_plane_is_recovered() {
    let (fraction, unmasked) = lit_plane_accuracy(0.0);
    assert!(unmasked > 10_000);
    assert!(fraction >= 0.95, "{fraction}");
}

#[test]
fn glossy_plane_stays_mostly_correct() {
    // the unmasked part of the specular lobe is view dependent and costs a few percent
    let (fraction, _) = lit_plane_accuracy(HeadlightModel::default().specular);
    assert!(fraction >= 0.9, "{fraction}");
}

#[test]
fn eight_view_orbit_is_dense_and_on_the_surface() {
    let scene = Scene::new(phantom().mesh.clone()).unwrap();
    let cfg = orbit_config(8);
    let rendered = render(&cfg, &scene);
    let rec = reconstruct_frames(&cfg, cfg.camera, as_frames(&rendered)).unwrap();
    assert!(rec.cloud.len() >= 10_000, "{} points", rec.cloud.len());
    let reference = rec.views.reference().pose;
    let within = rec
        .cloud
        .points()
        .iter()
        .filter(|p| scene.surface_distance(p) <= cfg.sweep.spacing_at(reference.to_camera(p).z))
        .count();
    let fraction = within as f64 / rec.cloud.len() as f64;
    assert!(fraction >= 0.9, "{fraction}");
}

#[test]
fn reference_depth_agrees_with_the_renderer() {
    let scene = Scene::new(phantom().mesh.clone()).unwrap();
    let cfg = PipelineConfig::default();
    let rendered = render(&cfg, &scene);
    let rec = reconstruct_frames(&cfg, cfg.camera, as_frames(&rendered)).unwrap();
    let reference = rendered.iter().find(|f| f.frame_id == rec.views.reference().id).unwrap();
    let (fraction, total) = depth_accuracy(&rec.depth, &reference.depth, &cfg.camera, &cfg.sweep);
    assert!(total > 10_000);
    assert!(fraction >= 0.9, "{fraction}");
    for (p, c) in rec.cloud.points().iter().zip(rec.cloud.confidence().unwrap()).step_by(37) {
        let px = project(&cfg.camera, &rec.views.reference().pose.to_camera(p)).unwrap();
        let (x, y) = (px.x.round() as usize, px.y.round() as usize);
        assert!((px - Vector2::new(x as f64, y as f64)).norm() < 1e-6);
        assert_eq!(rec.depth.confidence(x, y), *c);
    }
    let again = depth_to_pointcloud(&rec.depth, &cfg.camera, &rec.views.reference().pose);
    assert_eq!(again, rec.cloud);
}

#[test]
fn more_views_are_no_less_accurate() {
    let scene = Scene::new(phantom().mesh.clone()).unwrap();
    let median_distance = |count: usize| {
        let cfg = orbit_config(count);
        let rendered = render(&cfg, &scene);
        let rec = reconstruct_frames(&cfg, cfg.camera, as_frames(&rendered)).unwrap();
        median(rec.cloud.points().iter().map(|p| scene.surface_distance(p)).collect())
    };
    let (eight, many) = (median_distance(8), median_distance(32));
    assert!(many <= eight, "32 views {many} vs 8 views {eight}");
}

#[test]
fn textureless_surface_is_mostly_rejected() {
    let spec = PhantomSpec::default();
    let scene = Scene::new(build_phantom_mesh(&spec).unwrap()).unwrap();
    let cfg = orbit_config(16);
    let rendered = render(&cfg, &scene);
    let rec = reconstruct_frames(&cfg, cfg.camera, as_frames(&rendered)).unwrap();
    let reference = rendered.iter().find(|f| f.frame_id == rec.views.reference().id).unwrap();
    let unmasked = cfg.camera.width * cfg.camera.height - detect_specular_mask(&reference.image, 0.98).count();
    let rejected = 1.0 - rec.depth.valid_count() as f64 / unmasked as f64;
    assert!(rejected >= 0.5, "rejected {rejected}");
}

#[test]
fn reconstruction_is_deterministic() {
    let scene = Scene::new(phantom().mesh.clone()).unwrap();
    let cfg = orbit_config(6);
    let rendered = render(&cfg, &scene);
    let a = reconstruct_frames(&cfg, cfg.camera, as_frames(&rendered)).unwrap();
    let b = reconstruct_frames(&cfg, cfg.camera, as_frames(&rendered)).unwrap();
    assert_eq!(a.cloud, b.cloud);
    assert_eq!(a.source, b.source);
}
