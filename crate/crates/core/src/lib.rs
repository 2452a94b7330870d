//! Speaker-conditioned hierarchical autoregressive waveform model for multi-speaker
//! text-to-speech.
//!
//! Speaker identity enters the model either through a trainable one-hot embedding table or as
//! the time average of a speech encoder's frames over a seed signal, so voices unseen during
//! training can be synthesized from a few seconds of their speech without retraining.

pub mod audio;
pub mod conditioning;
pub mod container;
pub mod datasets;
pub mod dsp;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
