//! Multi-view synchronized video generation at desk scale.
//!
//! A small video diffusion transformer trained with rectified flow, a
//! plug-in cross-view synchronization module conditioned on camera
//! extrinsics, a procedural multi-view scene generator, and camera-pose
//! evaluation metrics.

pub mod backbone;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod model;
pub mod scene;
pub mod scmt;
pub mod sync;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
