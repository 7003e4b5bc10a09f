//! Fixtures shared by the benchmarks.

use ocmatch_core::pipeline::{build_phantom, trajectory_poses, CandidateConfig, PipelineConfig, Trajectory};
use ocmatch_core::render::{OrbitSpec, Scene};
use ocmatch_core::sweep::Frame;
use ocmatch_core::{CandidatePatch, RenderedFrame};

pub struct Fixture {
    pub config: PipelineConfig,
    pub scene: Scene,
    pub rendered: Vec<RenderedFrame>,
    pub polyps: Vec<CandidatePatch>,
}

/// Default phantom orbited by `views` cameras, with the two polyp patches.
pub fn orbit_fixture(views: usize) -> Fixture {
    let config = PipelineConfig {
        trajectory: Trajectory::Orbit(OrbitSpec {
            count: views,
            ..OrbitSpec::default()
        }),
        views,
        candidates: CandidateConfig {
            count: 2,
            ..CandidateConfig::default()
        },
        ..PipelineConfig::default()
    };
    let built = build_phantom(&config).expect("default phantom");
    let poses = trajectory_poses(&config, &built.manifest.polyps).expect("orbit poses");
    let scene = Scene::new(built.mesh).expect("scene");
    let rendered = scene.render_views(&config.camera, &poses, &config.light).expect("render");
    Fixture {
        config,
        scene,
        rendered,
        polyps: built.candidates,
    }
}

pub fn frames(rendered: &[RenderedFrame]) -> Vec<Frame> {
    rendered
        .iter()
        .map(|f| Frame {
            image: f.image.clone(),
            pose: f.pose,
            id: f.frame_id,
        })
        .collect()
}
