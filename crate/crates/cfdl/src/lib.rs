//! Multimodal classification laboratory built around two ideas: completed
//! feature disentanglement (splitting per-modality feature vectors into
//! shared, specific and partial-shared components across every modality
//! subset) and dynamic mixture-of-experts fusion (one expert per decoupled
//! feature, weighted by a local-global gating network).
//!
//! The crate ships its own matrix autodiff core, a synthetic data generator
//! with planted latent factors for verifying the method's claims, a full
//! training loop (Adam, warmup, stepped decay, checkpointing), an evaluation
//! battery, and a small CLI. See `examples/` for one runnable program per
//! capability.

pub mod cfd;
pub mod commands;
pub mod dmf;
pub mod gradcore;
pub mod metrics;
pub mod synthdata;
pub mod train;

pub use gradcore::{GradError, Linear, Matrix, Mode, ParamRef, Tape, Var};
