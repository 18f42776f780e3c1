//! Dynamic-resolution vision-language alignment at desk scale.
//!
//! The crate combines: region-of-interest geometry (box merging and
//! combination planning), multi-resolution patchification under a token
//! budget, small from-scratch image/text transformers with cross-resolution
//! fusion, three alignment objectives (contrastive, matching, generation),
//! and a synthetic-scene training/evaluation harness.

pub mod alignment;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod patchify;
pub mod tensor;

pub use error::{Error, Result};
