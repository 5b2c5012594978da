//! Text-guided object erasure on a tiny cross-attention diffusion denoiser.
//!
//! The pipeline inverts a synthetic-shapes image with DDIM, aligns it to its
//! prompt by optimising per-step null embeddings, then re-samples it while an
//! attention energy pushes the target words' cross-attention response down.
//! Self-attention keys/values recorded on a reconstruction branch are injected
//! into the edit branch, and an extra same-timestep latent update can be
//! repeated inside an optimisation window.

pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod guidance;
pub mod inversion;
pub mod ppm;
pub mod sampler;
pub mod schedule;
pub mod store;
pub mod training;

pub use error::{Error, Result};
