//! Signals: the [`Waveform`] carrier, synthetic sources, mixing, datasets,
//! WAV I/O, STFT and mel features.

pub mod dataset;
pub mod mel;
pub mod mix;
pub mod stft;
pub mod synth;
pub mod wav;

pub use dataset::{make_dataset, synthesize, synthesize_record, DatasetConfig, DatasetManifest, ManifestRecord};
pub use mix::{dominant_mixture, mix_at_snr, MixtureSample};
pub use synth::{synth_source, SourceKind, SourceSpec};

use crate::{Error, Result};

/// Default sample rate in Hz.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono samples plus their sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must not be empty"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f32) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(Error::invalid(format!(
                "waveforms differ: {} samples @ {} Hz vs {} samples @ {} Hz",
                self.len(),
                self.sample_rate,
                other.len(),
                other.sample_rate
            )));
        }
        Ok(())
    }

    /// Sample-wise sum of equally shaped waveforms.
    pub fn sum(waves: &[Waveform]) -> Result<Waveform> {
        let first = waves
            .first()
            .ok_or_else(|| Error::invalid("cannot sum an empty list of waveforms"))?;
        let mut acc = first.samples.clone();
        for w in &waves[1..] {
            first.check_compatible(w)?;
            for (a, b) in acc.iter_mut().zip(&w.samples) {
                *a += b;
            }
        }
        Waveform::new(acc, first.sample_rate)
    }
}
