//! Core of a neural music fingerprinting engine.
//!
//! Everything here is pure computation over in-memory buffers, so the crate
//! builds without `std` (only `alloc` is required). File formats, WAV IO and
//! the command-line pipeline live in the companion `nmfp` crate.
//!
//! The pipeline, in order of data flow:
//!
//! - [`audio`]: mono buffers, band-limited resampling, gain.
//! - [`features`]: 1 s log-mel segments on a 0.5 s grid, scaled to `[-1, 1]`.
//! - [`degrade`]: additive scene noise at a target SNR, room and microphone
//!   impulse responses convolved with acoustic history, random gain.
//! - [`batch`] and [`losses`]: false-negative-free batch sampling and the
//!   metric-learning loss suite (triplet, NT-Xent/MultiPosCon, DCL, A&U, KCL)
//!   with analytic gradients.
//! - [`encoder`] and [`train`]: a small fully-connected encoder, Adam, and the
//!   self-supervised training loop.
//! - [`index`]: fingerprint storage and two-stage (IVF + sequence) retrieval.
//! - [`eval`]: query generation and track/segment-level Top-1 scoring.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod audio;
pub mod batch;
pub mod degrade;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod fft;
pub mod gradcheck;
pub mod index;
pub mod linalg;
pub mod losses;
pub mod scalar;
pub mod selftest;
pub mod synth;
pub mod train;

pub use audio::AudioBuffer;
pub use error::{Error, Result};
pub use features::{MelConfig, MelSegment, SegmentSpec};
pub use linalg::Matrix;
pub use scalar::Scalar;

/// Seeded generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
