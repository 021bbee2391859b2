//! Dyadic conversational 3D head motion generation.
//!
//! The library generates an agent's head motion (50 expression, 3 jaw, and 3
//! pose parameters per frame) in a two-party conversation, one dialogue turn
//! at a time. Each turn's user speech, agent speech, user head motion, and
//! agent head motion are tokenized and interleaved into a single flat
//! sequence with separator tokens; a transformer with turn-level causal
//! attention fuses the sequence; and a small conditional diffusion head
//! predicts the agent's head frames at masked positions from the fused
//! features.
//!
//! Module map:
//! - [`config`], [`archive`], [`rng`]: configuration, the named-array file
//!   format, and deterministic random streams.
//! - [`nn`]: layers with explicit forward/backward passes and AdamW.
//! - [`featurize`]: waveform to speech features, speech and head encoders.
//! - [`context`]: per-turn token blocks, interleaving, masking, and the
//!   user-drop used for classifier-free guidance.
//! - [`fusion`]: the turn-level causal transformer.
//! - [`diffusion`]: noise schedule, denoiser, training loss, and sampler.
//! - [`model`]: ties encoders, fusion, and the denoiser into one parameter
//!   store.
//! - [`trainer`]: dataset loading, normalization, the training step, and
//!   checkpoints.
//! - [`streamer`]: turn-by-turn generation with a bounded context buffer.
//! - [`metrics`]: distribution and trajectory metrics for evaluation.
//! - [`datagen`]: the synthetic dyadic conversation corpus.

pub mod archive;
pub mod config;
pub mod context;
pub mod error;
pub mod nn;
pub mod rng;

pub mod datagen;
pub mod diffusion;
pub mod featurize;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod streamer;
pub mod trainer;

pub use error::{Error, Result};
