//! Log-magnitude mel spectrogram features.

use super::stft::Stft;
use super::Waveform;
use crate::tensor::{Tensor, LOG_EPS};
use crate::{Error, Result};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels × n_bins`, row-major.
///
/// Bins below the first centre belong fully to the first filter and bins
/// above the last centre to the last one, so the filters cover every bin.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f32>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, window_len: usize, n_mels: usize) -> Result<Self> {
        let n_bins = window_len / 2 + 1;
        if n_mels == 0 || n_mels > n_bins {
            return Err(Error::invalid(format!(
                "n_mels {n_mels} must be in 1..={n_bins} for a {window_len}-point window"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / window_len as f64;
        let mut weights = vec![0.0f32; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, centre, hi) = (points[m], points[m + 1], points[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = bin_hz(k);
                let v = if f <= centre {
                    if m == 0 {
                        1.0
                    } else {
                        (f - lo) / (centre - lo)
                    }
                } else if m == n_mels - 1 {
                    1.0
                } else {
                    (hi - f) / (hi - centre)
                };
                *w = v.max(0.0) as f32;
            }
            if row.iter().all(|&w| w == 0.0) {
                let nearest = ((centre * window_len as f64 / sample_rate as f64).round() as usize)
                    .min(n_bins - 1);
                row[nearest] = 1.0;
            }
        }
        Ok(MelFilterbank {
            n_mels,
            n_bins,
            weights,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Index of the filter with the largest weight at frequency `hz`.
    pub fn band_of(&self, hz: f64, sample_rate: u32, window_len: usize) -> usize {
        let k = ((hz * window_len as f64 / sample_rate as f64).round() as usize).min(self.n_bins - 1);
        (0..self.n_mels)
            .max_by(|&a, &b| self.row(a)[k].partial_cmp(&self.row(b)[k]).unwrap())
            .unwrap_or(0)
    }
}

/// `log10(mel · |STFT| + ε)` as an `n_mels × n_frames` tensor.
pub fn mel_features(w: &Waveform, window_len: usize, hop: usize, n_mels: usize) -> Result<Tensor<f32>> {
    let fb = MelFilterbank::new(w.sample_rate(), window_len, n_mels)?;
    mel_features_with(&fb, &Stft::new(window_len, hop)?, w)
}

pub fn mel_features_with(fb: &MelFilterbank, stft: &Stft, w: &Waveform) -> Result<Tensor<f32>> {
    let spec = stft.analyze(w);
    if spec.n_bins() != fb.n_bins {
        return Err(Error::invalid("filterbank and STFT disagree on bin count"));
    }
    let n_frames = spec.n_frames();
    let mut out = vec![0.0f32; fb.n_mels * n_frames];
    for (t, frame) in spec.frames().iter().enumerate() {
        let mags: Vec<f32> = frame.iter().map(|c| c.norm()).collect();
        for m in 0..fb.n_mels {
            let e: f32 = fb.row(m).iter().zip(&mags).map(|(w, v)| w * v).sum();
            out[m * n_frames + t] = (e as f64 + LOG_EPS).log10() as f32;
        }
    }
    Tensor::new(vec![fb.n_mels, n_frames], out)
}
