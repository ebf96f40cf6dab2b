//! Desk-scale multi-modal few-shot object detection.
//!
//! The crate implements the full mechanism chain on a deterministic synthetic
//! feature backend: rich-text corpora and tokenization, query/support feature
//! extraction with RoIAlign pooling, weight-shared attention encoding of both
//! modalities, vision+language prototype fusion feeding softmax
//! feature-matching coefficients, sigmoid foreground filtering and
//! class-agnostic task encoding, a bidirectional rich-text rectification
//! loss, an episodic n-way k-shot sampler over synthetic catalogs, and a
//! lightweight per-position detection head scored by VOC-style mAP. Every
//! differentiable kernel runs on a small reverse-mode tape whose gradients
//! are certified against central finite differences.

pub mod aggregation;
pub mod autodiff;
pub mod backends;
pub mod corpus;
pub mod detection;
pub mod episodes;
pub mod error;
pub mod harness;
mod init;
pub mod model;
pub mod rectify;

pub use error::{CoreError, Result};
