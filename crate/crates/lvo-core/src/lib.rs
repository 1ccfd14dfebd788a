//! Feature visualization by optimization for latent diffusion models.
//!
//! The crate turns a feature of a denoiser (a raw channel at a hooked layer,
//! or a sparse-autoencoder feature trained on that layer) into an image: it
//! finds the diffusion timesteps where the feature is most active, then
//! optimizes a latent so the feature fires strongly at those timesteps, under
//! regularizers that keep the latent on-distribution.
//!
//! The pipeline runs in four stages, each reading the previous stage's
//! artifacts from disk:
//!
//! 1. `analyze`: record top activating dataset examples per timestep and
//!    build per-feature activity profiles.
//! 2. `prior`: select activity peaks from the profiles.
//! 3. `visualize`: run the optimizer per (feature, peak, seed).
//! 4. `evaluate`: score and report the resulting visualizations.
//!
//! A fifth stage, `sweep`, re-runs `visualize` over one-parameter grids.

pub mod activity;
pub mod adapter;
pub mod error;
pub mod regularize;
pub mod rng;
pub mod sae;
pub mod schedule;
pub mod smoothing;
pub mod spectral;
pub mod transform;

pub use error::{LvoError, Result};
