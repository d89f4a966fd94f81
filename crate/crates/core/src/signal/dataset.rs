//! Reproducible synthetic mixture datasets and their JSONL manifests.

use super::mix::{mix_at_snr, MixtureSample};
use super::synth::{synth_source, SourceSpec};
use super::wav::{quantize, read_wav, write_wav};
use super::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::{par, Error, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Default disjoint f0 ranges, one per synthetic "speaker" class.
pub const DEFAULT_BANDS: [(f64, f64); 6] = [
    (85.0, 105.0),
    (120.0, 145.0),
    (165.0, 200.0),
    (225.0, 270.0),
    (300.0, 360.0),
    (400.0, 480.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Number of mixtures per source count.
    pub counts: BTreeMap<usize, usize>,
    pub duration: f64,
    pub sample_rate: u32,
    /// Range of per-source levels below source 1, in dB.
    pub snr_range_db: (f64, f64),
    pub seed: u64,
    pub split: String,
    pub bands: Vec<(f64, f64)>,
    pub am_rate_range: (f64, f64),
    pub am_depth_range: (f64, f64),
    /// Mixtures are rescaled (with their sources) to this peak.
    pub mixture_peak: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            counts: BTreeMap::new(),
            duration: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            snr_range_db: (-2.5, 2.5),
            seed: 0,
            split: "train".into(),
            bands: DEFAULT_BANDS.to_vec(),
            am_rate_range: (2.0, 6.0),
            am_depth_range: (0.3, 0.9),
            mixture_peak: 0.9,
        }
    }
}

impl DatasetConfig {
    pub fn with_counts(mut self, counts: &[(usize, usize)]) -> Self {
        self.counts = counts.iter().cloned().collect();
        self
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Source count of each record, in generation order.
    fn plan(&self) -> Vec<usize> {
        self.counts
            .iter()
            .flat_map(|(&n, &c)| std::iter::repeat(n).take(c))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        for &n in self.counts.keys() {
            if n == 0 || n > self.bands.len() {
                return Err(Error::invalid(format!(
                    "source count {n} needs between 1 and {} speaker bands",
                    self.bands.len()
                )));
            }
        }
        if !(self.duration > 0.0) || self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(Error::invalid("bad duration or SNR range"));
        }
        Ok(())
    }

    pub(crate) fn record_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Draws a random speaker from band `band`.
    pub(crate) fn speaker(&self, band: usize, rng: &mut ChaCha8Rng) -> SourceSpec {
        let (rlo, rhi) = self.am_rate_range;
        let (dlo, dhi) = self.am_depth_range;
        SourceSpec::harmonic(
            self.bands[band],
            if rhi > rlo { rng.gen_range(rlo..rhi) } else { rlo },
            if dhi > dlo { rng.gen_range(dlo..dhi) } else { dlo },
            rng.gen(),
        )
    }
}

/// Synthesizes record `index` with `n` sources. Pure in `(config, n, index)`.
pub fn synthesize_record(cfg: &DatasetConfig, n: usize, index: usize) -> Result<(MixtureSample, u64)> {
    let mut rng = cfg.record_rng(index);
    let record_seed: u64 = rng.gen();
    let bands = sample(&mut rng, cfg.bands.len(), n).into_vec();
    let sources = bands
        .iter()
        .map(|&b| synth_source(&cfg.speaker(b, &mut rng), cfg.duration, cfg.sample_rate))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = cfg.snr_range_db;
    let gains: Vec<f64> = (0..n)
        .map(|k| {
            if k == 0 {
                0.0
            } else if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        })
        .collect();
    let mixed = mix_at_snr(&sources, &gains)?;
    let peak = mixed.mixture.peak();
    let scaled = if peak > 0.0 {
        mixed.scaled(cfg.mixture_peak / peak)
    } else {
        mixed
    };
    // snap sources to the 16-bit grid and rebuild the mixture from them, so
    // the stored files satisfy mixture = Σ sources exactly
    let sources: Vec<Waveform> = scaled.sources.iter().map(quantize).collect();
    Ok((MixtureSample::from_sources(sources, scaled.gains_db)?, record_seed))
}

/// Generates every record of `cfg` in memory.
pub fn synthesize(cfg: &DatasetConfig) -> Result<Vec<MixtureSample>> {
    cfg.validate()?;
    let plan = cfg.plan();
    par::map_range(plan.len(), |i| synthesize_record(cfg, plan[i], i).map(|(m, _)| m))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mixture: String,
    pub sources: Vec<String>,
    pub gains_db: Vec<f64>,
    pub n: usize,
    pub split: String,
    pub seed: u64,
}

/// Records plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if r.n != r.sources.len() || r.n != r.gains_db.len() {
                return Err(Error::Format(format!(
                    "{}:{}: n = {} but {} sources / {} gains",
                    path.display(),
                    lineno + 1,
                    r.n,
                    r.sources.len(),
                    r.gains_db.len()
                )));
            }
            records.push(r);
        }
        Ok(DatasetManifest {
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn load(&self, index: usize) -> Result<MixtureSample> {
        let r = &self.records[index];
        let sources = r
            .sources
            .iter()
            .map(|p| read_wav(self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        let mixture = read_wav(self.resolve(&r.mixture))?;
        for s in &sources {
            mixture.check_compatible(s)?;
        }
        Ok(MixtureSample {
            mixture,
            sources,
            gains_db: r.gains_db.clone(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<MixtureSample>> {
        par::map_range(self.len(), |i| self.load(i)).into_iter().collect()
    }
}

/// Writes the dataset's WAV files under `out_dir/<split>/` and the manifest to
/// `out_dir/<split>.jsonl`.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let plan = cfg.plan();
    let manifest_path = out_dir.join(format!("{}.jsonl", cfg.split));
    if plan.is_empty() {
        return Ok(DatasetManifest {
            records: vec![],
            base_dir: out_dir.to_path_buf(),
        });
    }
    let wav_dir = out_dir.join(&cfg.split);
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let records = par::map_range(plan.len(), |i| -> Result<ManifestRecord> {
        let n = plan[i];
        let (sample, seed) = synthesize_record(cfg, n, i)?;
        let id = format!("{}-{:05}-n{}", cfg.split, i, n);
        let mixture = format!("{}/{id}_mix.wav", cfg.split);
        write_wav(out_dir.join(&mixture), &sample.mixture)?;
        let sources = sample
            .sources
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let rel = format!("{}/{id}_s{}.wav", cfg.split, k + 1);
                write_wav(out_dir.join(&rel), s).map(|_| rel)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ManifestRecord {
            id,
            mixture,
            sources,
            gains_db: sample.gains_db,
            n,
            split: cfg.split.clone(),
            seed,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(&manifest_path)?;
    Ok(manifest)
}
