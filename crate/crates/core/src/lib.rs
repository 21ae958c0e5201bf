//! Attractor-based end-to-end neural speaker diarization.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`optim`], [`checkpoint`]: a small dense tensor
//!   engine with tape-based reverse-mode autodiff, AdamW and a flat binary
//!   checkpoint format.
//! - [`features`]: log-mel filterbanks and frame stacking.
//! - [`datagen`]: synthetic multi-speaker corpora.
//! - [`nn`], [`encoder`], [`attractors`], [`model`]: transformer / conformer
//!   encoders, encoder-decoder attractors (LSTM, transformer, attribute) and
//!   the intermediate conditioning paths, composed into seven model variants.
//! - [`losses`], [`assignment`]: permutation-invariant BCE, existence loss.
//! - [`trainer`], [`inference`], [`metrics`], [`rttm`]: the experiment loop.

pub mod assignment;
pub mod attractors;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rttm;
pub mod tensor;
pub mod tol;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
