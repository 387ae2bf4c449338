//! Core primitives for multi-view relighting experiments: procedural scene
//! synthesis with a physically based direct-illumination renderer, HDR
//! environment maps and their lighting conditioning, camera geometry with
//! Plücker ray maps, the diffusion noise schedule and samplers, and the
//! evaluation metrics harness.

pub mod camera;
pub mod codec;
pub mod dataset;
pub mod diffusion;
pub mod envmap;
pub mod error;
pub mod math;
pub mod metrics;
pub mod resample;
pub mod rfi;
pub mod scene;

pub use error::{CoreError, Result};
pub use math::{Mat3, Mat4, Vec3};
