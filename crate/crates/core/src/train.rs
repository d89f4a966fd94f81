//! OR-PIT training and recursive fine-tuning.
//!
//! Per-sample gradients are computed on independent graphs (in parallel when
//! the `parallel` feature is on) and summed in batch order, so results do not
//! depend on the thread count.

use crate::loss::{or_pit_loss, score_splits};
use crate::metrics::{score_stems, EvalRecord};
use crate::model::{forward_graph, init_params, save_checkpoint, SeparatorConfig, SeparatorParams};
use crate::par;
use crate::recursion::{separate_recursive, stems_from_trace, Stopper};
use crate::signal::{DatasetManifest, MixtureSample, Waveform};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Share of each source count in the batch stream; must sum to 1.
    pub n_ratio: BTreeMap<usize, f64>,
    pub val_fraction: f64,
    /// Cap on validation mixtures per source count (0 = all).
    pub val_limit: usize,
    /// Save a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Fine-tuning: treat `r̂^1` as a constant input to step 2.
    pub stop_gradient: bool,
    /// Train on random crops of this many samples instead of whole clips.
    pub crop_len: Option<usize>,
    /// Global gradient-norm clip (None = off).
    pub grad_clip: Option<f64>,
    /// Halve the learning rate after this many epochs without validation
    /// improvement (0 = constant rate).
    pub plateau_patience: usize,
    pub model: SeparatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-5,
            seed: 42,
            n_ratio: BTreeMap::from([(2, 0.5), (3, 0.5)]),
            val_fraction: 0.1,
            val_limit: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            stop_gradient: false,
            crop_len: None,
            grad_clip: None,
            plateau_patience: 0,
            model: SeparatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        let total: f64 = self.n_ratio.values().sum();
        if self.n_ratio.is_empty() || (total - 1.0).abs() > 1e-9 || self.n_ratio.values().any(|&r| r < 0.0) {
            return Err(Error::invalid(format!("N ratios must be non-negative and sum to 1, got {total}")));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("bad learning rate or weight decay"));
        }
        self.model.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_sisnri_n2: Option<f64>,
    pub val_sisnri_n3: Option<f64>,
    /// Wins per split index (0-based), summed over the epoch.
    pub split_hist: Vec<usize>,
    /// |optimizer loss − independent recomputation| on the epoch's first sample.
    pub spot_check_error: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl TrainLog {
    /// CSV with columns `epoch,loss,val_sisnri_n2,val_sisnri_n3,seconds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_sisnri_n2,val_sisnri_n3,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{:.3}",
                e.epoch,
                e.loss,
                opt(e.val_sisnri_n2),
                opt(e.val_sisnri_n3),
                e.seconds
            );
        }
        s
    }

    /// Everything except wall-clock time, for reproducibility checks.
    pub fn deterministic_part(&self) -> Vec<(usize, u64, Option<u64>, Option<u64>, Vec<usize>)> {
        self.epochs
            .iter()
            .map(|e| {
                (
                    e.epoch,
                    e.loss.to_bits(),
                    e.val_sisnri_n2.map(f64::to_bits),
                    e.val_sisnri_n3.map(f64::to_bits),
                    e.split_hist.clone(),
                )
            })
            .collect()
    }
}

/// Train/validation split: the last `val_fraction` of each source count.
pub fn split_train_val(samples: &[MixtureSample], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut by_n: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_n.entry(s.n_sources()).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in by_n.values() {
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        let n_val = n_val.min(idx.len().saturating_sub(1));
        let cut = idx.len() - n_val;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Sample order for one epoch: each slot draws the source count whose
/// running share lags its target most, then the next index of that count's
/// shuffled list (wrapping).
fn epoch_order(
    groups: &BTreeMap<usize, Vec<usize>>,
    ratio: &BTreeMap<usize, f64>,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut shuffled: BTreeMap<usize, Vec<usize>> = groups.clone();
    for v in shuffled.values_mut() {
        v.shuffle(rng);
    }
    let active: Vec<(usize, f64)> = ratio
        .iter()
        .filter(|(n, &r)| r > 0.0 && shuffled.get(n).is_some_and(|v| !v.is_empty()))
        .map(|(&n, &r)| (n, r))
        .collect();
    let norm: f64 = active.iter().map(|(_, r)| r).sum();
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(len);
    for slot in 0..len {
        let (n, _) = active
            .iter()
            .map(|&(n, r)| {
                let want = (slot + 1) as f64 * r / norm;
                (n, want - *taken.get(&n).unwrap_or(&0) as f64)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        let k = taken.entry(n).or_insert(0);
        let list = &shuffled[&n];
        out.push(list[*k % list.len()]);
        *k += 1;
    }
    out
}

struct Example {
    mixture: Vec<f32>,
    sources: Vec<Vec<f64>>,
}

fn crop_example(s: &MixtureSample, crop: Option<usize>, rng: &mut ChaCha8Rng) -> Example {
    let len = s.mixture.len();
    let (start, n) = match crop {
        Some(c) if c < len => (rng.gen_range(0..=len - c), c),
        _ => (0, len),
    };
    Example {
        mixture: s.mixture.samples()[start..start + n].to_vec(),
        sources: s
            .sources
            .iter()
            .map(|w| w.samples()[start..start + n].iter().map(|&v| v as f64).collect())
            .collect(),
    }
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Tensor<f32>>,
    best: usize,
    /// Independently recomputed loss (f64) for the spot check.
    check: f64,
}

fn orpit_grad(params: &SeparatorParams, ex: &Example) -> Result<SampleGrad> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, true);
    let x = g.constant(Tensor::row(ex.mixture.clone())?);
    let out = forward_graph(&mut g, &params.config, &p, x)?;
    let l = or_pit_loss(&mut g, out.one, out.rest, &ex.sources)?;
    let loss = g.value(l.loss).item() as f64;
    let check = l.breakdown.total;
    let mut grads = g.backward(l.loss)?;
    Ok(SampleGrad {
        loss,
        grads: collect_grads(&mut grads, &p, params),
        best: l.best.0,
        check,
    })
}

/// Two-step loss: OR-PIT on the mixture, then OR-PIT of `F(r̂^1)` against the
/// sources left out by step 1's winning split.
fn finetune_grad(params: &SeparatorParams, ex: &Example, stop_gradient: bool) -> Result<SampleGrad> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, true);
    let x = g.constant(Tensor::row(ex.mixture.clone())?);
    let first = forward_graph(&mut g, &params.config, &p, x)?;
    let l1 = or_pit_loss(&mut g, first.one, first.rest, &ex.sources)?;
    let remaining: Vec<Vec<f64>> = ex
        .sources
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != l1.best.0)
        .map(|(_, s)| s.clone())
        .collect();
    let input2 = if stop_gradient {
        let v = g.value(first.rest).clone();
        g.constant(v)
    } else {
        first.rest
    };
    let second = forward_graph(&mut g, &params.config, &p, input2)?;
    let total = if remaining.len() >= 2 {
        let l2 = or_pit_loss(&mut g, second.one, second.rest, &remaining)?;
        g.add(l1.loss, l2.loss)?
    } else {
        l1.loss
    };
    let loss = g.value(total).item() as f64;
    let mut grads = g.backward(total)?;
    Ok(SampleGrad {
        loss,
        grads: collect_grads(&mut grads, &p, params),
        best: l1.best.0,
        check: loss,
    })
}

fn collect_grads(
    grads: &mut crate::tensor::Gradients<f32>,
    vars: &[crate::tensor::Var],
    params: &SeparatorParams,
) -> Vec<Tensor<f32>> {
    vars.iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

fn clip(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads
            .iter_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Mean best-permutation SI-SNRi with oracle stopping, per source count.
pub fn validate(params: &SeparatorParams, samples: &[&MixtureSample]) -> Result<BTreeMap<usize, f64>> {
    let records = par::map(samples, |s| -> Result<EvalRecord> {
        let trace = separate_recursive(params, &s.mixture, &Stopper::oracle(s.n_sources()))?;
        score_stems("val", s, &stems_from_trace(&trace)?)
    });
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let r = r?;
        let e = acc.entry(r.n).or_insert((0.0, 0));
        e.0 += r.si_snri_db;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect())
}

fn val_subset<'a>(samples: &'a [MixtureSample], idx: &[usize], limit: usize) -> Vec<&'a MixtureSample> {
    let mut per_n: BTreeMap<usize, usize> = BTreeMap::new();
    idx.iter()
        .map(|&i| &samples[i])
        .filter(|s| {
            let c = per_n.entry(s.n_sources()).or_insert(0);
            *c += 1;
            limit == 0 || *c <= limit
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    OrPit,
    FineTune { stop_gradient: bool },
}

fn run_training(
    mut params: SeparatorParams,
    samples: &[MixtureSample],
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(SeparatorParams, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let (train_idx, val_idx) = split_train_val(samples, cfg.val_fraction);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &train_idx {
        groups.entry(samples[i].n_sources()).or_default().push(i);
    }
    if !cfg.n_ratio.iter().any(|(n, &r)| r > 0.0 && groups.contains_key(n)) {
        return Err(Error::invalid("no training mixtures match the configured source counts"));
    }
    if let Mode::FineTune { .. } = mode {
        if samples.iter().any(|s| s.n_sources() < 2) {
            return Err(Error::invalid("fine-tuning needs mixtures of at least 2 sources"));
        }
    }
    let val = val_subset(samples, &val_idx, cfg.val_limit);
    let max_n = samples.iter().map(MixtureSample::n_sources).max().unwrap_or(2);
    let mut adam = AdamState::new(cfg.adam(), &params.tensors);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, SeparatorParams)> = None;
    let mut since_best = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ckpt = |p: &SeparatorParams, name: &str| -> Result<()> {
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_checkpoint(p, &dir.join(name))?;
        }
        Ok(())
    };
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let order = epoch_order(&groups, &cfg.n_ratio, train_idx.len(), &mut rng);
        let mut total = 0.0;
        let mut hist = vec![0usize; max_n];
        let mut spot = f64::NAN;
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<Example> = batch
                .iter()
                .map(|&i| crop_example(&samples[i], cfg.crop_len, &mut rng))
                .collect();
            let results = par::map(&examples, |ex| match mode {
                Mode::OrPit => orpit_grad(&params, ex),
                Mode::FineTune { stop_gradient } => finetune_grad(&params, ex, stop_gradient),
            });
            let mut sum: Vec<Tensor<f32>> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for r in results {
                let r = r?;
                if !r.loss.is_finite() || r.grads.iter().any(|g| !g.all_finite()) {
                    ckpt(&params, "last_good.orp")?;
                    return Err(Error::Numeric(format!("non-finite loss or gradient in epoch {epoch}")));
                }
                if spot.is_nan() {
                    spot = (r.loss - r.check).abs();
                }
                total += r.loss;
                hist[r.best] += 1;
                for (acc, g) in sum.iter_mut().zip(&r.grads) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f32;
            sum.iter_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
            if let Some(c) = cfg.grad_clip {
                clip(&mut sum, c);
            }
            adam.step(&mut params.tensors, &sum)?;
        }
        if !params.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        let scores = if val.is_empty() { BTreeMap::new() } else { validate(&params, &val)? };
        let entry = EpochLog {
            epoch,
            loss: total / order.len() as f64,
            val_sisnri_n2: scores.get(&2).copied(),
            val_sisnri_n3: scores.get(&3).copied(),
            split_hist: hist,
            spot_check_error: spot,
            lr: adam.config.lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.3} val n2 {} n3 {} ({:.1}s)",
            entry.loss,
            opt(entry.val_sisnri_n2),
            opt(entry.val_sisnri_n3),
            entry.seconds
        );
        log.epochs.push(entry);
        if !scores.is_empty() {
            let score = scores.values().sum::<f64>() / scores.len() as f64;
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, params.clone()));
                log.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.plateau_patience > 0 && since_best >= cfg.plateau_patience {
                    adam.config.lr *= 0.5;
                    since_best = 0;
                }
            }
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            ckpt(&params, &format!("epoch_{epoch:03}.orp"))?;
        }
    }
    let out = match best {
        Some((_, p)) => p,
        None => params,
    };
    ckpt(&out, "best.orp")?;
    Ok((out, log))
}

/// OR-PIT training from a fresh initialization of `cfg.model`.
pub fn train_orpit_samples(samples: &[MixtureSample], cfg: &TrainConfig) -> Result<(SeparatorParams, TrainLog)> {
    cfg.validate()?;
    let init = init_params(&cfg.model, cfg.seed)?;
    run_training(init, samples, cfg, Mode::OrPit)
}

pub fn train_orpit(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<(SeparatorParams, TrainLog)> {
    if manifest.is_empty() {
        return Err(Error::invalid("training manifest is empty"));
    }
    train_orpit_samples(&manifest.load_all()?, cfg)
}

/// Two-step recursive fine-tuning on 3-source mixtures.
pub fn fine_tune_recursive_samples(
    params: &SeparatorParams,
    samples: &[MixtureSample],
    cfg: &TrainConfig,
) -> Result<(SeparatorParams, TrainLog)> {
    let mut cfg = cfg.clone();
    cfg.model = params.config.clone();
    cfg.n_ratio = BTreeMap::from([(3, 1.0)]);
    // Single-source mixtures have no second step to train.
    let samples: Vec<MixtureSample> = samples.iter().filter(|s| s.n_sources() >= 2).cloned().collect();
    run_training(
        params.clone(),
        &samples,
        &cfg,
        Mode::FineTune {
            stop_gradient: cfg.stop_gradient,
        },
    )
}

pub fn fine_tune_recursive(
    params: &SeparatorParams,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<(SeparatorParams, TrainLog)> {
    if manifest.is_empty() {
        return Err(Error::invalid("fine-tuning manifest is empty"));
    }
    fine_tune_recursive_samples(params, &manifest.load_all()?, cfg)
}

/// Independent f64 recomputation of the OR-PIT loss for one example, from
/// inference outputs. Used by tests to audit what the optimizer saw.
pub fn recompute_loss(params: &SeparatorParams, mixture: &Waveform, sources: &[Waveform]) -> Result<f64> {
    let (one, rest) = crate::model::forward(params, mixture.samples())?;
    let one: Vec<f64> = one.iter().map(|&v| v as f64).collect();
    let rest: Vec<f64> = rest.iter().map(|&v| v as f64).collect();
    let src: Vec<Vec<f64>> = sources
        .iter()
        .map(|s| s.samples().iter().map(|&v| v as f64).collect())
        .collect();
    let refs: Vec<&[f64]> = src.iter().map(Vec::as_slice).collect();
    Ok(score_splits(&one, &rest, &refs)?.total)
}
