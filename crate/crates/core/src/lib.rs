//! Differentiable 2D Gaussian splatting for deformable scenes.
//!
//! The crate covers the full reconstruction pipeline: planar Gaussian
//! primitives and a tile-based rasterizer with an analytic backward pass
//! ([`raster`]), a per-splat temporal deformation model ([`deform`]), the
//! adaptive depth-loss schedule ([`sched`]), the optimization loop
//! ([`train`]), a small diffusion inpainting simulator ([`inpaint`]), image
//! and geometry metrics ([`metrics`]) and the on-disk formats plus a
//! synthetic scene generator ([`sceneio`]).

pub mod camera;
pub mod deform;
pub mod error;
pub mod frame;
pub mod gradcheck;
pub mod inpaint;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod primitive;
pub mod raster;
pub mod scene;
pub mod sceneio;
pub mod sched;
pub mod train;

pub use camera::{Camera, CameraRecord};
pub use deform::{BasisBank, DeformField};
pub use error::{Error, Result};
pub use frame::Frame;
pub use primitive::{build_h, eval_gaussian_uv, orthonormalize_frame, Gaussian2D, GaussianGrad, SplatParams};
pub use raster::{render, ProjectedSplat, Rasterizer, RenderOutput};
pub use scene::{Aabb, Scene};
pub use train::{TrainConfig, TrainReport, Trainer};
