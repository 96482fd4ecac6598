//! Multimodal-conditioned flow-matching video generation at desk scale.
//!
//! The pieces are a lossless patchify codec, channel-wise condition assembly
//! with reference pseudo frames, gated frame-local audio attention, a small
//! dual/single-stream transformer, staged training with checkpoint merging,
//! and a synthetic world whose conditioning effects can be measured.

pub mod audio;
pub mod checkpoint;
pub mod codec;
pub mod condition;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
