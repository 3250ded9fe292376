//! Sketch-to-image zero-shot retrieval with semantic anchors.
//!
//! A small trainable encoder maps sketch and image features into a shared
//! space. Training combines in-batch InfoNCE with anchored contrastive terms
//! whose targets come from word and visual class anchors, optionally adapted
//! by a GCN over a unified anchor graph.

pub mod anchorgraph;
pub mod anchors;
pub mod dataio;
pub mod encoder;
mod error;
pub mod experiment;
mod init;
pub mod losses;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
