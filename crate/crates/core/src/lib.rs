//! Scenario-aware audio-visual target speech extraction.
//!
//! The crate covers the whole desk-scale pipeline: signal analysis,
//! synthetic scene generation, the TF-domain extractor with visual
//! conditioning, the interference-type classifier, the routing cascade and
//! the training and evaluation harness.

pub mod cascade;
pub mod classifier;
pub mod config;
pub mod error;
pub mod gridnet;
pub mod harness;
pub mod loss;
pub mod scene;
pub mod signal;
pub mod visual;
pub mod wav;

pub use error::{CoreError, Result};
