//! Mono 16-bit PCM WAV files.
//!
//! Samples map to integers as `clamp(round(x · 32768), −32768, 32767)` with
//! rounding half away from zero, and back as `q / 32768`.

use super::Waveform;
use crate::{Error, Result};
use std::path::Path;

const SCALE: f32 = 32768.0;

pub fn quantize_sample(x: f32) -> i16 {
    (x * SCALE).round().clamp(-32768.0, 32767.0) as i16
}

pub fn dequantize_sample(q: i16) -> f32 {
    q as f32 / SCALE
}

/// Snaps a waveform onto the 16-bit grid, so that writing it is lossless.
pub fn quantize(w: &Waveform) -> Waveform {
    let samples = w
        .samples()
        .iter()
        .map(|&v| dequantize_sample(quantize_sample(v)))
        .collect();
    Waveform::new(samples, w.sample_rate()).expect("quantized samples are finite")
}

fn map_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_err(path, e))?;
    for &v in w.samples() {
        writer
            .write_sample(quantize_sample(v))
            .map_err(|e| map_err(path, e))?;
    }
    writer.finalize().map_err(|e| map_err(path, e))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| map_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(dequantize_sample))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_err(path, e))?;
    Waveform::new(samples, spec.sample_rate)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
