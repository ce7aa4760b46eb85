//! Benchmarks for data-space and feature-space augmentation.
//!
//! A fixed convolution + LP-pooling feature stage sits between raw images and
//! three trainable heads (MLP, linear SVM, ELM). Synthetic training data is
//! produced either by warping images ([`warp`]) or by oversampling feature
//! vectors ([`oversample`]), and the [`harness`] sweeps real vs. synthetic
//! sample counts to produce learning curves.

pub mod classifiers;
pub mod dataset;
mod envelope;
pub mod error;
pub mod features;
pub mod harness;
pub mod oversample;
pub mod rng;
pub mod warp;

pub use error::{Error, Result};
