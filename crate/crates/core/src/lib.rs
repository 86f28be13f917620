//! Multimodal coreset selection.
//!
//! Given image embeddings with class labels and one text embedding per
//! class, the engine fits a pair of residual adapters with a contrastive
//! loss, scores every sample for image/text alignment and for local
//! same-class diversity, and picks a subset of a requested size by gradient
//! descent on relaxed per-sample decisions.
//!
//! Modules follow the pipeline order: [`store`] (the `ESB1` file format),
//! [`adapter`], [`scoring`], [`selector`], and [`pipeline`] which chains
//! them. [`synth`] builds synthetic worlds with known label noise and
//! corruption for testing.

pub mod adapter;
pub mod error;
pub mod pipeline;
pub mod scoring;
pub mod selector;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
