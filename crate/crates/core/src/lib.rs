//! Intro and credits detection over per-second frame-embedding sequences.
//!
//! A video is a sequence of frame embeddings sampled at one frame per
//! second. [`model::TemporalSegmenter`] labels every position of a fixed
//! length window as intro/credits (1) or main content (0); [`infer`] slides
//! that window over videos of any length and turns the result into segments.
//!
//! The numeric layer ([`tensor`], [`autodiff`], [`optim`]) is self-contained:
//! a reverse-mode autodiff graph generic over `f32`/`f64`, so the same model
//! code can be gradient-checked in double precision.

pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod data;
mod binio;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// The crate-wide deterministic random generator.
pub type Rng = rand_chacha::ChaCha8Rng;

// The guide's code listings run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sequences.md")]
    mod sequences {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
