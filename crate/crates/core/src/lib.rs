//! Desk-scale unified generation and detection of synthetic images.
//!
//! One transformer backbone serves two tasks: it generates images by flow
//! matching over patchified latents and it detects (and explains) synthetic
//! images, with detection tokens attending to the generation latents of the
//! same image. Training runs in two stages: joint fine-tuning of all tasks,
//! then alignment of the generator's intermediate features with a frozen
//! copy of the detector.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradsuite;
pub mod image;
pub mod masks;
pub mod model;
pub mod objectives;
pub mod smsa;
pub mod synthcorpus;
pub mod tensorgrad;
pub mod train;

pub use error::{Error, Result};
