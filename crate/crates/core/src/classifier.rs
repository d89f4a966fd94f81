//! Small convolutional classifiers over log-mel features.
//!
//! The binary head answers "does this residual still carry a source?" and
//! drives recursive stopping. The multiclass head counts sources directly and
//! serves as the baseline.
//!
//! Network: two (conv k3 → ReLU → max-pool 2) blocks over time with mel bands
//! as input channels, a time average, and a dense layer.

use crate::checkpoint::Container;
use crate::model::{separate_long, SeparatorParams};
use crate::par;
use crate::signal::mel::mel_features;
use crate::signal::{MixtureSample, Waveform};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

pub const CHECKPOINT_KIND: &str = "classifier";

/// Log-mel values are mapped through `(v − FEATURE_OFFSET) / FEATURE_SCALE`,
/// which puts exact silence at −1.
const FEATURE_OFFSET: f32 = -4.0;
const FEATURE_SCALE: f32 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FeatureConfig {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window: 1024,
            hop: 512,
            n_mels: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Head {
    Binary,
    /// Classes `1..=k_max`.
    Multiclass(usize),
}

impl Head {
    fn outputs(self) -> usize {
        match self {
            Head::Binary => 1,
            Head::Multiclass(k) => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub head: Head,
    pub features: FeatureConfig,
    pub channels: (usize, usize),
    /// `conv1.w, conv1.b, conv2.w, conv2.b, dense.w, dense.b`.
    pub tensors: Vec<Tensor<f32>>,
    pub val_accuracy: Option<f64>,
}

const NAMES: [&str; 6] = ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "dense.w", "dense.b"];

impl ClassifierParams {
    pub fn init(head: Head, features: FeatureConfig, channels: (usize, usize), seed: u64) -> Result<Self> {
        if let Head::Multiclass(k) = head {
            if k < 2 {
                return Err(Error::invalid("multiclass head needs at least 2 classes"));
            }
        }
        if channels.0 == 0 || channels.1 == 0 || features.n_mels == 0 {
            return Err(Error::invalid("classifier channel counts must be positive"));
        }
        let (c1, c2) = channels;
        let shapes = [
            vec![c1, features.n_mels, 3],
            vec![c1],
            vec![c2, c1, 3],
            vec![c2],
            vec![head.outputs(), c2, 1],
            vec![head.outputs()],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let b = 1.0 / ((shape[1] * shape[2]) as f32).sqrt();
                    (0..n).map(|_| rng.gen_range(-b..=b)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(ClassifierParams {
            head,
            features,
            channels,
            tensors,
            val_accuracy: None,
        })
    }

    /// Binary classifier with default features and fixed seed; for plumbing and tests.
    pub fn untrained_binary() -> Self {
        Self::init(Head::Binary, FeatureConfig::default(), (8, 8), 0).expect("valid defaults")
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_KIND);
        match self.head {
            Head::Binary => c.set("head", "binary"),
            Head::Multiclass(k) => {
                c.set("head", "multiclass");
                c.set("k_max", k);
            }
        }
        c.set("window", self.features.window);
        c.set("hop", self.features.hop);
        c.set("n_mels", self.features.n_mels);
        c.set("c1", self.channels.0);
        c.set("c2", self.channels.1);
        if let Some(a) = self.val_accuracy {
            c.set("val_accuracy", a);
        }
        for (name, t) in NAMES.iter().zip(&self.tensors) {
            c.push(*name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let head = match c.get("head")? {
            "binary" => Head::Binary,
            "multiclass" => Head::Multiclass(c.parse("k_max")?),
            other => return Err(Error::Format(format!("unknown classifier head `{other}`"))),
        };
        let features = FeatureConfig {
            window: c.parse("window")?,
            hop: c.parse("hop")?,
            n_mels: c.parse("n_mels")?,
        };
        let channels = (c.parse("c1")?, c.parse("c2")?);
        let mut p = Self::init(head, features, channels, 0).map_err(|e| Error::Format(e.to_string()))?;
        for (i, name) in NAMES.iter().enumerate() {
            let t = c.tensor(name)?;
            if t.shape() != p.tensors[i].shape() || !t.all_finite() {
                return Err(Error::Format(format!("classifier tensor `{name}` is malformed")));
            }
            p.tensors[i] = t.clone();
        }
        p.val_accuracy = c.header.get("val_accuracy").and_then(|v| v.parse().ok());
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Normalized log-mel features `[n_mels × frames]` of `w`.
pub fn featurize(features: &FeatureConfig, w: &Waveform) -> Result<Tensor<f32>> {
    if w.len() < features.window {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one feature frame ({})",
            w.len(),
            features.window
        )));
    }
    let mut f = mel_features(w, features.window, features.hop, features.n_mels)?;
    f.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v - FEATURE_OFFSET) / FEATURE_SCALE);
    Ok(f)
}

fn logits(g: &mut Graph<f32>, p: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for block in 0..2 {
        let hp = g.pad(h, 1, 1)?;
        let c = g.conv1d(hp, p[2 * block], 1, 1)?;
        let c = g.add_bias(c, p[2 * block + 1])?;
        let c = g.relu(c)?;
        h = g.max_pool2(c)?;
    }
    let m = g.mean_time(h)?;
    let d = g.conv1d(m, p[4], 1, 1)?;
    g.add_bias(d, p[5])
}

fn bind(g: &mut Graph<f32>, params: &ClassifierParams, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

/// Raw output logits for precomputed features.
pub fn logits_of(params: &ClassifierParams, feats: &Tensor<f32>) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let x = g.constant(feats.clone());
    let z = logits(&mut g, &p, x)?;
    Ok(g.value(z).data().to_vec())
}

fn sigmoid(z: f32) -> f64 {
    1.0 / (1.0 + (-(z as f64)).exp())
}

/// Probability that `w` still carries a source.
pub fn predict_is_source(params: &ClassifierParams, w: &Waveform) -> Result<f64> {
    if params.head != Head::Binary {
        return Err(Error::invalid("predict_is_source needs a binary classifier"));
    }
    let z = logits_of(params, &featurize(&params.features, w)?)?;
    Ok(sigmoid(z[0]))
}

/// Most likely source count (1-based) from a multiclass head.
pub fn predict_count(params: &ClassifierParams, w: &Waveform) -> Result<usize> {
    if !matches!(params.head, Head::Multiclass(_)) {
        return Err(Error::invalid("predict_count needs a multiclass classifier"));
    }
    let z = logits_of(params, &featurize(&params.features, w)?)?;
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub features: Vec<Tensor<f32>>,
    /// Binary: 1 = source-bearing, 0 = exhausted. Multiclass: class index.
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct StopSetConfig {
    pub features: FeatureConfig,
    /// Share of records that add a low-level noise negative.
    pub noise_fraction: f64,
    /// Every `silence_every`-th record adds an all-zero negative.
    pub silence_every: usize,
    pub noise_rms_range: (f64, f64),
    /// Allowed positive share; positives or negatives are thinned to fit.
    pub balance: (f64, f64),
}

impl Default for StopSetConfig {
    fn default() -> Self {
        StopSetConfig {
            features: FeatureConfig::default(),
            noise_fraction: 1.0,
            silence_every: 10,
            noise_rms_range: (1e-4, 1e-2),
            balance: (0.4, 0.6),
        }
    }
}

/// Labeled residuals for the stop classifier.
///
/// For a record with N sources: the mixture and the residuals `r̂^1..r̂^{N−1}`
/// are positives, the over-run residual `r̂^N` is a negative. Low-level noise
/// and exact silence add further negatives.
pub fn build_stop_training_set(
    sep: &SeparatorParams,
    samples: &[MixtureSample],
    cfg: &StopSetConfig,
    seed: u64,
) -> Result<LabeledSet> {
    if samples.is_empty() {
        return Err(Error::invalid("stop classifier needs at least one mixture"));
    }
    let per_record = par::map_range(samples.len(), |i| -> Result<Vec<(Tensor<f32>, usize)>> {
        let s = &samples[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut out = vec![(featurize(&cfg.features, &s.mixture)?, 1)];
        let mut residual = s.mixture.clone();
        for j in 1..=s.n_sources() {
            residual = separate_long(sep, &residual)?.1;
            let label = usize::from(j < s.n_sources());
            out.push((featurize(&cfg.features, &residual)?, label));
        }
        let sr = s.mixture.sample_rate();
        if rng.gen_bool(cfg.noise_fraction.clamp(0.0, 1.0)) {
            let (lo, hi) = cfg.noise_rms_range;
            let rms = if hi > lo { rng.gen_range(lo.ln()..hi.ln()).exp() } else { lo };
            let a = (rms * 3f64.sqrt()) as f32;
            let noise: Vec<f32> = (0..s.mixture.len()).map(|_| rng.gen_range(-a..a)).collect();
            out.push((featurize(&cfg.features, &Waveform::new(noise, sr)?)?, 0));
        }
        if cfg.silence_every > 0 && i % cfg.silence_every == 0 {
            out.push((featurize(&cfg.features, &Waveform::zeros(s.mixture.len(), sr)?)?, 0));
        }
        Ok(out)
    });
    let mut items = Vec::new();
    for r in per_record {
        items.extend(r?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    items.shuffle(&mut rng);
    rebalance(&mut items, cfg.balance);
    let (features, labels) = items.into_iter().unzip();
    Ok(LabeledSet { features, labels })
}

/// Drops surplus examples of the majority label until the positive share
/// lies within `balance`.
fn rebalance(items: &mut Vec<(Tensor<f32>, usize)>, balance: (f64, f64)) {
    let pos = items.iter().filter(|(_, l)| *l == 1).count();
    let neg = items.len() - pos;
    let frac = pos as f64 / items.len().max(1) as f64;
    let (drop_label, keep) = if frac > balance.1 {
        (1, ((balance.1 / (1.0 - balance.1)) * neg as f64).floor() as usize)
    } else if frac < balance.0 {
        (0, (((1.0 - balance.0) / balance.0) * pos as f64).floor() as usize)
    } else {
        return;
    };
    let mut seen = 0;
    items.retain(|(_, l)| {
        if *l != drop_label {
            return true;
        }
        seen += 1;
        seen <= keep
    });
}

#[derive(Clone, Debug)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub val_fraction: f64,
    pub channels: (usize, usize),
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig::default(),
            val_fraction: 0.2,
            channels: (16, 16),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierLog {
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

fn example_loss(g: &mut Graph<f32>, p: &[Var], head: Head, feats: &Tensor<f32>, label: usize) -> Result<Var> {
    let x = g.constant(feats.clone());
    let z = logits(g, p, x)?;
    match head {
        Head::Binary => g.bce_with_logits(z, label as f32),
        Head::Multiclass(_) => g.softmax_cross_entropy(z, label),
    }
}

fn predict_label(params: &ClassifierParams, feats: &Tensor<f32>) -> Result<usize> {
    let z = logits_of(params, feats)?;
    Ok(match params.head {
        Head::Binary => usize::from(z[0] >= 0.0),
        Head::Multiclass(_) => {
            let mut best = 0;
            for (i, &v) in z.iter().enumerate() {
                if v > z[best] {
                    best = i;
                }
            }
            best
        }
    })
}

fn accuracy(params: &ClassifierParams, set: &LabeledSet, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = par::map(idx, |&i| predict_label(params, &set.features[i]));
    let mut correct = 0;
    for (&i, p) in idx.iter().zip(preds) {
        correct += usize::from(p? == set.labels[i]);
    }
    Ok(correct as f64 / idx.len() as f64)
}

fn train(
    mut params: ClassifierParams,
    set: &LabeledSet,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(ClassifierParams, ClassifierLog)> {
    if set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.batch_size == 0 {
        return Err(Error::invalid("bad classifier training config"));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((set.len() as f64) * cfg.val_fraction).round() as usize;
    let (val, train_idx) = order.split_at(n_val.min(set.len() - 1));
    let mut train_idx = train_idx.to_vec();
    let val = val.to_vec();
    let mut adam = AdamState::new(cfg.adam, &params.tensors);
    let mut log = ClassifierLog {
        epoch_loss: Vec::new(),
        val_accuracy: Vec::new(),
    };
    // best validation epoch so far; without a validation split the last epoch wins
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    for _ in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let results = par::map(batch, |&i| -> Result<(f64, Vec<Tensor<f32>>)> {
                let mut g = Graph::new();
                let p = bind(&mut g, &params, true);
                let loss = example_loss(&mut g, &p, params.head, &set.features[i], set.labels[i])?;
                let value = g.value(loss).item() as f64;
                let mut grads = g.backward(loss)?;
                let gs = p
                    .iter()
                    .zip(&params.tensors)
                    .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                    .collect();
                Ok((value, gs))
            });
            let mut sum: Vec<Tensor<f32>> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for r in results {
                let (l, gs) = r?;
                total += l;
                for (acc, g) in sum.iter_mut().zip(gs) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f32;
            sum.iter_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
            adam.step(&mut params.tensors, &sum)?;
        }
        let mean = total / train_idx.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric("classifier loss became non-finite".into()));
        }
        log.epoch_loss.push(mean);
        let acc = accuracy(&params, set, &val)?;
        log.val_accuracy.push(acc);
        log::debug!(
            "classifier epoch {}: loss {:.4} val acc {:.3}",
            log.epoch_loss.len(),
            mean,
            acc
        );
        if acc.is_finite() && best.as_ref().map_or(true, |(b, _)| acc > *b) {
            best = Some((acc, params.tensors.clone()));
        }
    }
    match best {
        Some((acc, tensors)) => {
            params.tensors = tensors;
            params.val_accuracy = Some(acc);
        }
        None => params.val_accuracy = None,
    }
    Ok((params, log))
}

/// Trains the binary stop classifier on `set` (labels 0/1).
pub fn train_binary(
    set: &LabeledSet,
    features: FeatureConfig,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(ClassifierParams, ClassifierLog)> {
    let pos = set.labels.iter().filter(|&&l| l == 1).count();
    if set.labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("binary labels must be 0 or 1"));
    }
    if pos == 0 || pos == set.len() {
        return Err(Error::invalid("binary training needs both labels present"));
    }
    let params = ClassifierParams::init(Head::Binary, features, cfg.channels, seed)?;
    train(params, set, cfg, seed)
}

/// Mixture features labeled with `n − 1` for the direct-count baseline.
pub fn count_set(samples: &[MixtureSample], features: FeatureConfig, k_max: usize) -> Result<LabeledSet> {
    for n in 1..=k_max {
        if !samples.iter().any(|s| s.n_sources() == n) {
            return Err(Error::invalid(format!("count data has no {n}-source mixture")));
        }
    }
    if let Some(s) = samples.iter().find(|s| s.n_sources() > k_max) {
        return Err(Error::invalid(format!(
            "mixture with {} sources exceeds k_max {k_max}",
            s.n_sources()
        )));
    }
    let feats = par::map(samples, |s| featurize(&features, &s.mixture));
    Ok(LabeledSet {
        features: feats.into_iter().collect::<Result<_>>()?,
        labels: samples.iter().map(|s| s.n_sources() - 1).collect(),
    })
}

pub fn train_count_baseline(
    samples: &[MixtureSample],
    k_max: usize,
    features: FeatureConfig,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(ClassifierParams, ClassifierLog)> {
    let set = count_set(samples, features, k_max)?;
    let params = ClassifierParams::init(Head::Multiclass(k_max), features, cfg.channels, seed)?;
    train(params, &set, cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountEvalResult {
    /// `confusion[true − 1][predicted − 1]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    pub accuracy: f64,
}

impl CountEvalResult {
    /// Builds the result from `(true count, predicted count)` pairs.
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        let k = pairs.iter().map(|&(t, p)| t.max(p)).max().unwrap_or(0);
        let mut confusion = vec![vec![0; k]; k];
        for &(t, p) in pairs {
            confusion[t - 1][p - 1] += 1;
        }
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect();
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        CountEvalResult {
            confusion,
            per_class_accuracy,
            accuracy: if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 },
        }
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }
}

pub fn evaluate_count_baseline(params: &ClassifierParams, samples: &[MixtureSample]) -> Result<CountEvalResult> {
    let preds = par::map(samples, |s| predict_count(params, &s.mixture));
    let pairs = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| Ok((s.n_sources(), p?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CountEvalResult::from_pairs(&pairs))
}

/// Counting by recursive separation with the binary stop classifier.
///
/// A mixture is sized correctly exactly when every intermediate residual is
/// judged source-bearing and the final one exhausted, i.e. the estimated
/// count equals the true count.
pub fn evaluate_recursive_counting(
    sep: &SeparatorParams,
    clf: &std::sync::Arc<ClassifierParams>,
    samples: &[MixtureSample],
    threshold: f64,
) -> Result<CountEvalResult> {
    let preds = par::map(samples, |s| {
        crate::recursion::estimate_count(sep, &s.mixture, clf.clone(), threshold).map(|c| c.count)
    });
    let pairs = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| Ok((s.n_sources(), p?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CountEvalResult::from_pairs(&pairs))
}
