//! Synthetic stand-ins for speech sources.
//!
//! A "speaker" is a harmonic complex whose fundamental is drawn from a
//! speaker-specific range, with a slow amplitude envelope playing the role of
//! syllabic modulation. Filtered noise and chirps are available for
//! non-harmonic material.

use super::Waveform;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Peak amplitude of every synthesized source.
pub const PEAK: f32 = 0.7;

/// Upper bound on the number of partials of a harmonic complex.
pub const MAX_HARMONICS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    HarmonicComplex,
    FilteredNoise,
    Chirp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// Fundamental range in Hz (centre frequency for noise, sweep range for chirps).
    pub f0_range: (f64, f64),
    /// Amplitude-modulation rate in Hz.
    pub am_rate: f64,
    /// Amplitude-modulation depth in `[0, 1]`.
    pub am_depth: f64,
    pub seed: u64,
}

impl SourceSpec {
    pub fn harmonic(f0_range: (f64, f64), am_rate: f64, am_depth: f64, seed: u64) -> Self {
        SourceSpec {
            kind: SourceKind::HarmonicComplex,
            f0_range,
            am_rate,
            am_depth,
            seed,
        }
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = self.f0_range;
        if !(lo > 0.0 && lo <= hi && hi < nyquist) {
            return Err(Error::invalid(format!(
                "f0 range {lo}..{hi} Hz must lie inside (0, {nyquist})"
            )));
        }
        if !(0.0..=1.0).contains(&self.am_depth) || !(self.am_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "modulation depth {} / rate {} out of range",
                self.am_depth, self.am_rate
            )));
        }
        Ok(())
    }
}

/// Renders `spec` for `duration` seconds; the result peaks at [`PEAK`].
pub fn synth_source(spec: &SourceSpec, duration: f64, sample_rate: u32) -> Result<Waveform> {
    if !(duration > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    spec.validate(sample_rate)?;
    let n = (duration * sample_rate as f64).round().max(1.0) as usize;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.f0_range;
    let am_phase = rng.gen::<f64>() * 2.0 * PI;

    let mut out: Vec<f64> = match spec.kind {
        SourceKind::HarmonicComplex => {
            let f0 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let count = ((sr / 2.0 / f0).ceil() as usize - 1).clamp(1, MAX_HARMONICS);
            let partials: Vec<(f64, f64)> = (1..=count)
                .map(|h| (h as f64, rng.gen::<f64>() * 2.0 * PI))
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    partials
                        .iter()
                        .map(|&(h, ph)| (2.0 * PI * h * f0 * t + ph).sin() / h)
                        .sum()
                })
                .collect()
        }
        SourceKind::FilteredNoise => {
            let fc = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            // constant-peak-gain band-pass biquad, Q = 2
            let w0 = 2.0 * PI * fc / sr;
            let alpha = w0.sin() / (2.0 * 2.0);
            let a0 = 1.0 + alpha;
            let (b0, b2) = (alpha / a0, -alpha / a0);
            let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
            let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
            (0..n)
                .map(|_| {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
                    x2 = x1;
                    x1 = x;
                    y2 = y1;
                    y1 = y;
                    y
                })
                .collect()
        }
        SourceKind::Chirp => {
            let span = n as f64 / sr;
            let ph0 = rng.gen::<f64>() * 2.0 * PI;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (lo * t + (hi - lo) * t * t / (2.0 * span)) + ph0).sin()
                })
                .collect()
        }
    };

    for (i, v) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let env = 1.0 - spec.am_depth * (0.5 - 0.5 * (2.0 * PI * spec.am_rate * t + am_phase).cos());
        *v *= env;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    Waveform::new(out.into_iter().map(|v| (v * gain) as f32).collect(), sample_rate)
}
