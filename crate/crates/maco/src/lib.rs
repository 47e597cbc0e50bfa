//! Metric-agnostic conditional few-shot image classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine with exactly the
//!   primitives the network needs, generic over `f32`/`f64`.
//! - [`model`]: the four network stages (feature embedding, relational
//!   class summaries, query conditioning, joint classification) over a
//!   shared parameter store.
//! - [`episodes`]: episodic K-way n-shot sampling, augmentation and a
//!   synthetic shape dataset.
//! - [`train`]: Nadam, the episodic training loop, checkpoints and metrics.
//! - [`io`]: dataset ingestion, run configuration and the command entry
//!   points used by the CLI.

pub mod episodes;
pub mod error;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
