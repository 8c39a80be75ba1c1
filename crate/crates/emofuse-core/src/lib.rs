//! Bimodal speech emotion recognition at desk scale.
//!
//! This crate trains and evaluates four-class emotion classifiers that
//! combine two modalities: acoustic low-level descriptors extracted from
//! waveforms, and precomputed word-embedding sequences. It ships its own
//! deterministic neural-network engine (dense, 1-D convolution, batch
//! normalization, masked pooling, dropout, Adam with warmup), fold
//! construction with speaker/script leakage audits, exact rank-based AUC
//! metrics, and a reproducible experiment harness.

pub mod dsp;
pub mod embeddings;
pub mod error;
pub mod folds;
pub mod harness;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod synth;
pub mod util;
pub mod wav;

pub use error::{Error, Result};
