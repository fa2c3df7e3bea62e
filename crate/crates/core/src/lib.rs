//! Restoration of printed-then-scanned images.
//!
//! The pipeline has two stages: a color encoder predicts the original
//! image's per-channel statistics and the scanned image is re-normalized
//! toward them (global correction), then a conditional denoising diffusion
//! model removes the remaining local degradations by running a truncated
//! reverse chain that starts from the color-corrected image. A seeded
//! degradation synthesizer fabricates scanner-style training pairs, and an
//! evaluation harness scores restorations and runs the ablation benchmark.

pub mod colorcorrect;
pub mod dataprep;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
pub use image::{channel_stats, load_image, save_image, ColorStats, Image};
