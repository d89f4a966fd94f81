use crate::*;
use anyhow::{bail, Context, Result};
use orpit_core::classifier::{
    build_stop_training_set, evaluate_count_baseline, evaluate_recursive_counting, train_binary,
    train_count_baseline, ClassifierParams, ClassifierTrainConfig, FeatureConfig, Head, StopSetConfig,
};
use orpit_core::experiments::{dominant_csv, dominant_eval};
use orpit_core::metrics::{evaluate_set, ibm_separate};
use orpit_core::model::{load_checkpoint, save_checkpoint, SeparatorConfig, SeparatorParams};
use orpit_core::recursion::{separate_recursive, stems_from_trace, Stopper};
use orpit_core::signal::wav::{read_wav, write_wav};
use orpit_core::signal::{make_dataset, DatasetConfig, DatasetManifest};
use orpit_core::tensor::AdamConfig;
use orpit_core::train::{fine_tune_recursive, train_orpit, TrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// A usage problem detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(core) = cause.downcast_ref::<orpit_core::Error>() {
            return match core {
                orpit_core::Error::InvalidArgument(_) => EXIT_USAGE,
                e if e.is_numeric() => EXIT_NUMERIC,
                e if e.is_data_error() => EXIT_DATA,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Separate(a) => separate(a),
        Command::Count(a) => count(a),
        Command::Evaluate(a) => evaluate(a),
        Command::DominantEval(a) => dominant(a),
        Command::TrainStopper(a) => train_stopper(a),
        Command::TrainCounter(a) => train_counter(a),
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| usage(format!("bad {what} `{p}`"))))
        .collect()
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("{what} must look like lo:hi")))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|_| usage(format!("bad {what} `{s}`")));
    Ok((p(a)?, p(b)?))
}

fn guard_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(Usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut counts = BTreeMap::new();
    for item in a.counts.split(',') {
        let (n, c) = item
            .split_once(':')
            .ok_or_else(|| usage(format!("count entry `{item}` must be N:count")))?;
        let n: usize = n.trim().parse().map_err(|_| usage(format!("bad source count `{n}`")))?;
        let c: usize = c.trim().parse().map_err(|_| usage(format!("bad mixture count `{c}`")))?;
        counts.insert(n, c);
    }
    let cfg = DatasetConfig {
        counts,
        duration: a.duration,
        seed: a.seed,
        split: a.split,
        snr_range_db: parse_pair(&a.snr, "--snr")?,
        ..DatasetConfig::default()
    };
    let manifest = make_dataset(&cfg, &a.out_dir)?;
    println!("wrote {} mixtures under {}", manifest.len(), a.out_dir.display());
    Ok(())
}

fn model_config(s: &ModelShape) -> Result<SeparatorConfig> {
    let dilations = parse_list(&s.dilations, "dilation")?;
    Ok(SeparatorConfig {
        n_basis: s.n_basis,
        enc_kernel: s.enc_kernel,
        enc_stride: s.enc_stride,
        mask_layers: dilations.len(),
        mask_channels: s.mask_channels,
        dilations,
        segment_len: s.segment_len,
        seed: 0,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    guard_output(&a.model, a.force)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        crop_len: a.crop,
        val_fraction: a.val_fraction,
        checkpoint_dir: a.checkpoint_dir,
        checkpoint_every: a.checkpoint_every,
        model: model_config(&a.shape)?,
        ..TrainConfig::default()
    };
    let (params, log) = train_orpit(&manifest, &cfg)?;
    save_checkpoint(&params, &a.model)?;
    if let Some(p) = a.log {
        write_text(&p, &log.to_csv())?;
    }
    println!("saved {} ({} epochs)", a.model.display(), log.epochs.len());
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let params = load_checkpoint(&a.model)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        crop_len: a.crop,
        stop_gradient: a.stop_gradient,
        ..TrainConfig::default()
    };
    let (tuned, log) = fine_tune_recursive(&params, &manifest, &cfg)?;
    save_checkpoint(&tuned, &a.out)?;
    if let Some(p) = a.log {
        write_text(&p, &log.to_csv())?;
    }
    println!("saved {}", a.out.display());
    Ok(())
}

enum StopSpec {
    Fixed(usize),
    Oracle(Option<usize>),
    Classifier,
}

fn parse_stopper(s: &str) -> Result<StopSpec> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, v)) => (k, Some(v)),
        None => (s, None),
    };
    let num = |v: &str| -> Result<usize> {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("bad stopper count `{v}`"))),
        }
    };
    match (kind, arg) {
        ("fixed", Some(v)) => Ok(StopSpec::Fixed(num(v)?)),
        ("oracle", None) => Ok(StopSpec::Oracle(None)),
        ("oracle", Some(v)) => Ok(StopSpec::Oracle(Some(num(v)?))),
        ("classifier", None) => Ok(StopSpec::Classifier),
        _ => Err(usage(format!(
            "unknown stopper `{s}` (expected fixed:J, oracle[:N] or classifier)"
        ))),
    }
}

fn load_model(path: &Path, segment_len: Option<usize>) -> Result<SeparatorParams> {
    let mut p = load_checkpoint(path)?;
    if let Some(seg) = segment_len {
        p.config.segment_len = seg;
        p.config.validate()?;
    }
    Ok(p)
}

fn load_classifier(path: Option<&PathBuf>) -> Result<Arc<ClassifierParams>> {
    let path = path.ok_or_else(|| usage("--stopper classifier needs --classifier"))?;
    let c = ClassifierParams::load(path)?;
    if c.head != Head::Binary {
        bail!(Usage(format!("{} is not a binary stop classifier", path.display())));
    }
    Ok(Arc::new(c))
}

/// Builds the stopper for a mixture whose true count (if known) is `n`.
fn stopper_for(spec: &StopSpec, clf: &Option<Arc<ClassifierParams>>, threshold: f64, n: Option<usize>) -> Result<Stopper> {
    Ok(match spec {
        StopSpec::Fixed(j) => Stopper::fixed(*j),
        StopSpec::Oracle(Some(k)) => Stopper::oracle(*k),
        StopSpec::Oracle(None) => Stopper::oracle(n.ok_or_else(|| usage("oracle stopping needs oracle:N here"))?),
        StopSpec::Classifier => Stopper::classifier(clf.clone().expect("classifier loaded"), threshold),
    })
}

fn separate(a: SeparateArgs) -> Result<()> {
    let spec = parse_stopper(&a.stop.stopper)?;
    let clf = match spec {
        StopSpec::Classifier => Some(load_classifier(a.stop.classifier.as_ref())?),
        _ => None,
    };
    let params = load_model(&a.model, a.stop.segment_len)?;
    let x = read_wav(&a.input)?;
    let stopper = stopper_for(&spec, &clf, a.stop.threshold, None)?;
    let trace = separate_recursive(&params, &x, &stopper)?;
    let stems = stems_from_trace(&trace)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let paths: Vec<PathBuf> = (1..=stems.len())
        .map(|k| a.out_dir.join(format!("stem_{k}.wav")))
        .collect();
    for p in &paths {
        guard_output(p, a.force)?;
    }
    for (p, s) in paths.iter().zip(&stems) {
        write_wav(p, s)?;
    }
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let json = serde_json::to_string_pretty(&trace.to_json(&names))?;
    write_text(&a.out_dir.join("trace.json"), &json)?;
    println!("{} stems written to {}", stems.len(), a.out_dir.display());
    Ok(())
}

fn count(a: CountArgs) -> Result<()> {
    let params = load_model(&a.model, None)?;
    let clf = load_classifier(Some(&a.classifier))?;
    match (&a.input, &a.manifest) {
        (Some(wav), None) => {
            let x = read_wav(wav)?;
            let est = orpit_core::recursion::estimate_count(&params, &x, clf, a.threshold)?;
            let json = serde_json::json!({
                "estimated_count": est.count,
                "truncated": est.truncated,
                "low_confidence": est.low_confidence,
            });
            println!("{json}");
            Ok(())
        }
        (None, Some(m)) => {
            let manifest = DatasetManifest::read(m)?;
            let samples = manifest.load_all()?;
            let result = evaluate_recursive_counting(&params, &clf, &samples, a.threshold)?;
            let json = serde_json::to_string_pretty(&result)?;
            match a.report {
                Some(p) => write_text(&p, &json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        _ => Err(usage("count needs exactly one of --in or --manifest")),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let report = if a.ibm {
        evaluate_set(&manifest, |s| ibm_separate(&s.mixture, &s.sources, 256, 128))
    } else {
        let model = a.model.as_ref().ok_or_else(|| usage("evaluate needs --model or --ibm"))?;
        let spec = parse_stopper(&a.stop.stopper)?;
        let clf = match spec {
            StopSpec::Classifier => Some(load_classifier(a.stop.classifier.as_ref())?),
            _ => None,
        };
        let params = load_model(model, a.stop.segment_len)?;
        evaluate_set(&manifest, |s| {
            let stopper = stopper_for(&spec, &clf, a.stop.threshold, Some(s.n_sources()))
                .map_err(|e| orpit_core::Error::InvalidArgument(e.to_string()))?;
            stems_from_trace(&separate_recursive(&params, &s.mixture, &stopper)?)
        })
    };
    report.write(&a.report)?;
    let summary = report.summary();
    println!(
        "{} mixtures, mean SI-SNRi {:.2} dB, SDRi {:.2} dB, {} failures",
        summary.overall.count, summary.overall.mean_si_snri_db, summary.overall.mean_sdri_db, summary.failures
    );
    Ok(())
}

fn dominant(a: DominantArgs) -> Result<()> {
    let params = load_model(&a.model, None)?;
    let counts = parse_list(&a.interferers, "interferer count")?;
    let cfg = DatasetConfig {
        seed: a.seed,
        duration: a.duration,
        ..DatasetConfig::default()
    };
    let rows = dominant_eval(&params, &cfg, &counts, a.per_case)?;
    let csv = dominant_csv(&rows);
    match a.report {
        Some(p) => write_text(&p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn classifier_config(t: &ClassifierTrainArgs) -> ClassifierTrainConfig {
    ClassifierTrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        adam: AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        ..ClassifierTrainConfig::default()
    }
}

fn features(t: &ClassifierTrainArgs) -> FeatureConfig {
    FeatureConfig {
        n_mels: t.n_mels,
        ..FeatureConfig::default()
    }
}

fn train_stopper(a: TrainStopperArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let sep = load_checkpoint(&a.model)?;
    let samples = DatasetManifest::read(&a.manifest)?.load_all()?;
    let set_cfg = StopSetConfig {
        features: features(&a.train),
        ..StopSetConfig::default()
    };
    let set = build_stop_training_set(&sep, &samples, &set_cfg, a.train.seed)?;
    let (clf, _log) = train_binary(&set, set_cfg.features, &classifier_config(&a.train), a.train.seed)?;
    clf.save(&a.out)?;
    println!(
        "saved {} ({} examples, {:.0}% positive, val accuracy {})",
        a.out.display(),
        set.len(),
        100.0 * set.positive_fraction(),
        clf.val_accuracy.map_or("n/a".into(), |v| format!("{:.3}", v))
    );
    Ok(())
}

fn train_counter(a: TrainCounterArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let samples = DatasetManifest::read(&a.manifest)?.load_all()?;
    let (clf, _log) = train_count_baseline(
        &samples,
        a.k_max,
        features(&a.train),
        &classifier_config(&a.train),
        a.train.seed,
    )?;
    clf.save(&a.out)?;
    let acc = evaluate_count_baseline(&clf, &samples)?;
    println!("saved {} (training accuracy {:.3})", a.out.display(), acc.accuracy);
    Ok(())
}
