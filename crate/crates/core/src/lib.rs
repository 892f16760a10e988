//! Training engine for attention-based encoder-decoder LSTM translation
//! models over virtual devices.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`]: dense row-major arrays and deterministic primitive kernels;
//! - [`autograd`]: a replayable tape for reverse-mode differentiation;
//! - [`model`]: the stacked-LSTM encoder-decoder with global attention, with
//!   and without input-feeding, plus parameter accounting and checkpoints;
//! - [`parallel`]: serial, data-parallel, model-parallel (wavefront) and
//!   hybrid execution strategies over worker-thread virtual devices, with
//!   event traces;
//! - [`sim`]: a discrete-event cost simulator for makespan and
//!   scaling-factor prediction, with calibration against measured targets;
//! - [`trainer`]: Adam training loop with perplexity-driven learning-rate
//!   decay and throughput metrics;
//! - [`decode`]: greedy and beam-search decoding with length normalization,
//!   and corpus BLEU;
//! - [`vocab`] / [`corpus`] / [`config`]: corpus ingestion, toy-task
//!   generation and run configuration.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};

