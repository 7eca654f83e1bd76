//! Adversarial robustness toolkit for stereo matching networks.
//!
//! The crate provides:
//!
//! - numerical kernels for disparity-guided feature warping ([`ops`]),
//! - a small reverse-mode tape for differentiating losses back to the input
//!   images ([`tape`]),
//! - attack objectives built on feature discrepancy ([`losses`]),
//! - sign-gradient perturbation drivers under an L-infinity budget
//!   ([`attack`]),
//! - a bundled trainable toy stereo network and proxy feature extractor
//!   ([`models`]),
//! - evaluation metrics, per-layer similarity profiling and disparity
//!   histograms ([`metrics`]),
//! - dataset loaders, a synthetic stereogram generator and report sinks
//!   ([`io`]).

pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod tape;
pub mod types;

pub use error::{Error, Result};
