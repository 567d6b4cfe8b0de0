//! Two-stage conditional diffusion for per-frame developmental stage
//! classification of multi-focal time-lapse sequences.
//!
//! Stage 1 trains a per-frame encoder on the central focal plane and freezes
//! it. Stage 2 fuses per-plane features, derives semantic and boundary
//! conditions, and trains a denoiser that recovers label embeddings from
//! Gaussian noise; inference runs a DDIM sampler.

pub mod condition;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod frame_encoder;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod stage;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
