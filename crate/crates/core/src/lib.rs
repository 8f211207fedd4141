//! Iterative preference distillation for small diffusion models.
//!
//! A teacher epsilon-prediction network is trained on a 2D Gaussian mixture,
//! pruned block by block, and the pruned student is distilled back toward the
//! teacher with a regularized diffusion-DPO objective over curated
//! winner/loser pairs. Everything runs on the CPU in 64-bit floats and is
//! deterministic given a seed.

pub mod config;
pub mod curation;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod export;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pruning;
pub mod reward;
pub mod rng;

pub use error::{Error, Result};

/// Sizes the global worker pool used for block importance and toy arms.
/// Results do not depend on the thread count.
pub fn init_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("threads", e.to_string()))
}
