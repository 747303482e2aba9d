//! Adversarial camouflage generation for vehicles at desk scale.
//!
//! The pipeline optimizes a UV texture map over a 3D vehicle mesh, through a
//! differentiable rasterizer plus an environment-feature fusion network, so
//! that a frozen object detector fails on the rendered vehicle across camera
//! poses and weather conditions. Everything runs on CPU with deterministic
//! seeding; an analytic environment oracle (Lambertian shading + exponential
//! fog) stands in for a photo-realistic simulator.

pub mod config;
pub mod dataset;
pub mod detect;
pub mod environment;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mesh_render;
pub mod nn;
pub mod optimize;
pub mod pngio;

pub use error::{Error, Result};
