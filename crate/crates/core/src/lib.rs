//! Unified video stylization at desk scale.
//!
//! A tiny diffusion transformer is conditioned on text tags, a style image,
//! or a stylized first frame through frame-wise concatenated condition slabs,
//! adapted with token-routed LoRA, and trained with flow matching on
//! procedurally generated paired videos.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub mod codec;
pub mod conditioning;
pub mod datagen;
pub mod flow;
pub mod metrics;
pub mod net;
pub mod vtf;
pub mod checkpoint;
pub mod trainer;
pub mod config;
pub mod pipeline;
pub mod commands;
