//! Video object-and-effect removal on a procedural toy world.
//!
//! The crate covers the full pipeline: a synthetic scene generator with
//! exact ground truth, structured two-part removal prompts, a tiny diffusion
//! transformer with per-block learnable guidance fusion, multi-conditional
//! guidance arithmetic, flow-matching samplers with noise-level expert
//! routing, two-stage training and evaluation metrics.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod sampler;
pub mod tape;
pub mod text;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
