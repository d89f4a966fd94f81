//! Recursive single-channel source separation for an unknown number of
//! sources.
//!
//! A separator is trained with the one-and-rest permutation invariant
//! objective to split its input into one source and the sum of the rest.
//! Applying it again to the residual peels off the next source; a small
//! classifier decides when the residual no longer carries a source, which
//! also yields an estimate of the source count.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff over dense arrays plus Adam.
//! - [`signal`]: synthetic sources, mixing, datasets, WAV, STFT and mel features.
//! - [`metrics`]: SI-SNR, projection SDR, permutation scoring, ideal binary mask.
//! - [`loss`]: the one-and-rest PIT objective.
//! - [`model`]: the time-domain encoder / mask / decoder separator.
//! - [`recursion`]: recursive separation and stopping rules.
//! - [`classifier`]: the residual stop classifier and the direct-count baseline.
//! - [`train`]: OR-PIT training and recursive fine-tuning.
//! - [`experiments`]: the dominant-source schedule.
//!
//! Batch work (per-sample gradients, per-mixture evaluation) fans out through
//! [`par`], which uses rayon when the `parallel` feature is enabled and plain
//! iteration otherwise. Results are identical either way.

pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod par;
pub mod recursion;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use signal::Waveform;
