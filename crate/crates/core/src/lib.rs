//! Gaze-aligned layer probing and single-layer steering for a toy
//! decoder-only transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`numkit`]: dense linear algebra, PCA, Pearson correlation, sampling.
//! - [`model`]: the transformer, its tokenizer, training, generation and checkpoints.
//! - [`gaze`]: eye-movement corpora and word/token alignment of hidden states.
//! - [`probe`]: layer × measure correlation reports and layer buckets.
//! - [`adapt`]: bottleneck adapters, single-layer fine-tuning and layer selection.
//! - [`steer`]: value-vector contrastive steering and the detoxification harness.

pub mod adapt;
pub mod error;
pub mod gaze;
pub mod model;
pub mod numkit;
pub mod probe;
pub mod steer;

pub use error::{Error, Result};
