//! Rhythm-controllable attention testbed.
//!
//! A desk-scale sequence-to-sequence synthesis stack built to study how
//! attention mechanisms behave on long inputs and under external duration
//! control:
//!
//! * [`tensor`] / [`tape`] — dense f64 tensors with tape-based reverse-mode
//!   autodiff, gradient-checked against finite differences
//! * [`attention`] — four alignment mechanisms behind one step interface:
//!   location-sensitive, GMM, forward, and rhythm-gated (rc)
//! * [`model`] — a small encoder/attention/decoder frame predictor with
//!   duration and style conditioning
//! * [`corpus`] — deterministic synthetic corpus with exact ground-truth
//!   alignments and per-symbol durations
//! * [`train`] / [`eval`] — Adam training loop, checkpointing, alignment
//!   diagnostics (skip / repeat / collapse / truncation) and rhythm-control
//!   response measurements

pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use tape::{Graph, Var};
pub use tensor::Tensor;
