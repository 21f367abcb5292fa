//! Multi-source time-series domain adaptation through prompt tuning.
//!
//! The pipeline has three phases over a frozen problem geometry (n channels,
//! length-L series, K classes, prompt length m):
//!
//! 1. **Pretraining** ([`train::pretrain`]) fits a mixture-of-experts patch
//!    transformer on the pooled source domains with a zero prompt occupying
//!    the first m time steps.
//! 2. **Prompt tuning** ([`train::reptile_tune`]) freezes the backbone and
//!    learns a common prompt plus one conditional prompt generator per source
//!    domain, using first-order Reptile over domains and a combined objective:
//!    classification + fidelity + leave-one-out discrimination.
//! 3. **Adaptation** ([`train::target_transfer`], [`train::select_source`])
//!    fits a target generator on a handful of labeled shots, then picks the
//!    nearest source domain by cosine similarity between domain prompts;
//!    prediction runs the frozen model under the selected source's generator.
//!
//! Everything is deterministic given the configured seeds, and every artifact
//! (datasets, checkpoints, metrics, heatmaps) round-trips bit-exactly.

#![forbid(unsafe_code)]

pub mod audit;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
mod nets;
pub mod objective;
pub mod prompt;
pub mod train;

pub use error::PondError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PondError>;
