//! Short-time Fourier transform with a periodic Hann window at 50% overlap.
//!
//! The periodic Hann window sums to exactly one at hop `N/2`, so the inverse
//! is a plain overlap-add of inverse FFT frames. The signal is padded by
//! `N/2` at the front (and enough at the back) so every input sample is
//! covered by two frames, which makes reconstruction exact everywhere.

use super::Waveform;
use crate::{Error, Result};
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

/// Half-spectrum frames (`N/2 + 1` bins each).
#[derive(Clone, Debug)]
pub struct Spectrogram {
    frames: Vec<Vec<Complex32>>,
    window_len: usize,
    hop: usize,
    signal_len: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn frames(&self) -> &[Vec<Complex32>] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Vec<Complex32>] {
        &mut self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Reusable forward/inverse plans for one window length.
pub struct Stft {
    window_len: usize,
    window: Vec<f32>,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl Stft {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        if window_len < 2 || window_len % 2 != 0 {
            return Err(Error::invalid(format!(
                "window length {window_len} must be even and at least 2"
            )));
        }
        if hop != window_len / 2 {
            return Err(Error::invalid(format!(
                "hop {hop} must be half the window length {window_len}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Stft {
            window_len,
            window: hann_periodic(window_len),
            forward: planner.plan_fft_forward(window_len),
            inverse: planner.plan_fft_inverse(window_len),
        })
    }

    fn hop(&self) -> usize {
        self.window_len / 2
    }

    pub fn analyze(&self, w: &Waveform) -> Spectrogram {
        let n = self.window_len;
        let h = self.hop();
        let t = w.len();
        let padded_len = (t + 2 * h).div_ceil(h) * h;
        let mut padded = vec![0.0f32; padded_len];
        padded[h..h + t].copy_from_slice(w.samples());
        let n_frames = (padded_len - n) / h + 1;
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        let frames = (0..n_frames)
            .map(|m| {
                let seg = &padded[m * h..m * h + n];
                for ((b, &x), &win) in buf.iter_mut().zip(seg).zip(&self.window) {
                    *b = Complex32::new(x * win, 0.0);
                }
                self.forward.process(&mut buf);
                buf[..n / 2 + 1].to_vec()
            })
            .collect();
        Spectrogram {
            frames,
            window_len: n,
            hop: h,
            signal_len: t,
            sample_rate: w.sample_rate(),
        }
    }

    pub fn synthesize(&self, spec: &Spectrogram) -> Result<Waveform> {
        let n = self.window_len;
        if spec.window_len != n {
            return Err(Error::invalid(format!(
                "spectrogram window {} does not match plan {n}",
                spec.window_len
            )));
        }
        let h = self.hop();
        let padded_len = (spec.n_frames() - 1) * h + n;
        let mut out = vec![0.0f32; padded_len];
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        let scale = 1.0 / n as f32;
        for (m, frame) in spec.frames.iter().enumerate() {
            if frame.len() != n / 2 + 1 {
                return Err(Error::invalid("spectrogram frame has the wrong bin count"));
            }
            buf[..n / 2 + 1].copy_from_slice(frame);
            for k in 1..n / 2 {
                buf[n - k] = frame[k].conj();
            }
            self.inverse.process(&mut buf);
            for (o, b) in out[m * h..m * h + n].iter_mut().zip(&buf) {
                *o += b.re * scale;
            }
        }
        let end = h + spec.signal_len;
        if end > padded_len {
            return Err(Error::invalid("spectrogram too short for its signal length"));
        }
        Waveform::new(out[h..end].to_vec(), spec.sample_rate)
    }
}

pub fn hann_periodic(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

pub fn stft(w: &Waveform, window_len: usize, hop: usize) -> Result<Spectrogram> {
    Ok(Stft::new(window_len, hop)?.analyze(w))
}

pub fn istft(spec: &Spectrogram, window_len: usize, hop: usize) -> Result<Waveform> {
    Stft::new(window_len, hop)?.synthesize(spec)
}
