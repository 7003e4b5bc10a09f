//! Shape matching of colonoscopy reconstructions against CT-derived surface
//! patches.
//!
//! The crate covers the whole chain: a procedural colon phantom with polyps,
//! headlight rendering of endoscope views, plane-sweep reconstruction, rigid
//! CPD registration with scale, and ranking of candidate patches by the
//! final CPD σ.

// `!(x > 0.0)` style checks are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bvh;
pub mod cpd;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod matching;
pub mod mesh;
pub mod phantom;
pub mod pipeline;
pub mod render;
pub mod sweep;

pub use cpd::{register, CpdConfig, PointSet, RegistrationResult};
pub use error::{Error, Result};
pub use geometry::{
    apply, compose, invert, plane_homography, project, CameraModel, Plane3, RigidPose, SimilarityTransform,
};
pub use image::{GrayImage, Mask};
pub use matching::{match_all, sigma_profile, CandidatePatch, MatchEntry, MatchReport, FOLD_LABEL};
pub use mesh::TriangleMesh;
pub use phantom::{build_phantom_mesh, sample_candidate_patches, PhantomSpec, PolypSpec};
pub use render::{render_views, HeadlightModel, RenderedFrame};
pub use sweep::{
    depth_to_pointcloud, detect_specular_mask, reconstruct, select_depth, sweep_cost, CostVolume, DepthMap, Frame,
    SweepConfig, ViewSet,
};
