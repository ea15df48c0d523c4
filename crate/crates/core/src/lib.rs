//! Mamba-2 audio captioning at desk scale.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors and
//! reverse-mode differentiation, [`ssd`] the selective state-space scan in
//! three equivalent modes, [`blocks`] the Mamba-2 language model with LoRA,
//! [`audio`] the waveform front-end and patch encoder, [`connector`] the
//! audio-to-LLM embedding layouts, [`pipeline`] training/inference and
//! persistence, and [`diagnostics`] the representation analyses.

pub mod audio;
pub mod blocks;
pub mod connector;
pub mod diagnostics;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod ssd;

pub use error::{Error, Result};
