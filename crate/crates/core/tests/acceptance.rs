//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Trains the documented acceptance configuration from scratch (about ten
//! minutes on one core). Set `ORPIT_ACCEPTANCE_CACHE=<dir>` to keep the
//! trained separator and classifiers between runs; a cached run reports the
//! training time recorded when the cache was filled.

mod support;

use orpit_core::classifier::{
    build_stop_training_set, evaluate_count_baseline, evaluate_recursive_counting, train_binary,
    train_count_baseline, ClassifierParams, ClassifierTrainConfig, FeatureConfig, StopSetConfig,
};
use orpit_core::experiments::dominant_eval;
use orpit_core::loss::{or_pit_loss, residual_target, upit_loss_n2};
use orpit_core::metrics::{evaluate_samples, ibm_separate, si_snr, EvalReport};
use orpit_core::model::{forward, load_checkpoint, save_checkpoint, SeparatorConfig, SeparatorParams};
use orpit_core::recursion::{separate_recursive, stems_from_trace, Stopper};
use orpit_core::signal::wav::{quantize, read_wav, write_wav};
use orpit_core::signal::{synthesize, DatasetConfig, MixtureSample, Waveform};
use orpit_core::tensor::{Graph, Tensor};
use orpit_core::train::{fine_tune_recursive_samples, train_orpit_samples, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

const TRAIN_SEED: u64 = 42;
const EVAL_SEED: u64 = 4242;
const COUNT_SEED: u64 = 4343;
const COUNTER_DATA_SEED: u64 = 43;
const DOMINANT_SEED: u64 = 7;

fn acceptance_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 8,
        lr: 1e-3,
        seed: TRAIN_SEED,
        val_fraction: 0.05,
        val_limit: 25,
        crop_len: Some(4000),
        model: SeparatorConfig {
            n_basis: 32,
            mask_channels: 32,
            ..SeparatorConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn classifier_config() -> ClassifierTrainConfig {
    ClassifierTrainConfig { epochs: 40, ..ClassifierTrainConfig::default() }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("ORPIT_ACCEPTANCE_CACHE").map(|d| {
        let d = PathBuf::from(d);
        std::fs::create_dir_all(&d).expect("create cache dir");
        d
    })
}

fn data(seed: u64, split: &str, counts: &[(usize, usize)]) -> Vec<MixtureSample> {
    synthesize(&DatasetConfig {
        seed,
        split: split.into(),
        ..DatasetConfig::default().with_counts(counts)
    })
    .expect("synthesize")
}

fn labeled(samples: &[MixtureSample], prefix: &str) -> Vec<(String, MixtureSample)> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("{prefix}-{i}"), s.clone()))
        .collect()
}

fn model_report(params: &SeparatorParams, samples: &[(String, MixtureSample)]) -> EvalReport {
    evaluate_samples(samples, |s| {
        stems_from_trace(&separate_recursive(params, &s.mixture, &Stopper::oracle(s.n_sources()))?)
    })
}

fn ibm_report(samples: &[(String, MixtureSample)]) -> EvalReport {
    evaluate_samples(samples, |s| ibm_separate(&s.mixture, &s.sources, 256, 128))
}

fn mean_for(report: &EvalReport, n: usize) -> f64 {
    report.summary().per_n.get(&n).map_or(f64::NAN, |a| a.mean_si_snri_db)
}

/// The trained separator plus the wall-clock cost of producing it.
struct Trained {
    params: SeparatorParams,
    train_seconds: f64,
    cached: bool,
}

fn train_separator(train: &[MixtureSample]) -> Trained {
    let cache = cache_dir();
    if let Some(dir) = &cache {
        let (model, secs) = (dir.join("separator.orp"), dir.join("train_seconds"));
        if model.exists() && secs.exists() {
            return Trained {
                params: load_checkpoint(&model).expect("cached separator"),
                train_seconds: std::fs::read_to_string(secs).unwrap().trim().parse().unwrap(),
                cached: true,
            };
        }
    }
    let t0 = Instant::now();
    let (params, _log) = train_orpit_samples(train, &acceptance_train_config()).expect("training");
    let train_seconds = t0.elapsed().as_secs_f64();
    if let Some(dir) = &cache {
        save_checkpoint(&params, &dir.join("separator.orp")).unwrap();
        std::fs::write(dir.join("train_seconds"), format!("{train_seconds}")).unwrap();
    }
    Trained {
        params,
        train_seconds,
        cached: false,
    }
}

fn cached_classifier(name: &str, make: impl FnOnce() -> ClassifierParams) -> ClassifierParams {
    match cache_dir() {
        Some(dir) => {
            let path = dir.join(name);
            if path.exists() {
                return ClassifierParams::load(&path).expect("cached classifier");
            }
            let c = make();
            c.save(&path).unwrap();
            c
        }
        None => make(),
    }
}

// ---- criteria -----------------------------------------------------------

fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Enumerates every split with its own residual sums and minimum search.
fn brute_force(one: &[f64], rest: &[f64], sources: &[Vec<f64>]) -> (usize, f64) {
    let n = sources.len();
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..n {
        let mut residual = vec![0.0; one.len()];
        let mut first = true;
        for (k, s) in sources.iter().enumerate() {
            if k == i {
                continue;
            }
            if first {
                residual.copy_from_slice(s);
                first = false;
            } else {
                residual.iter_mut().zip(s).for_each(|(r, v)| *r += v);
            }
        }
        let total = -si_snr(one, &sources[i]).unwrap() + -si_snr(rest, &residual).unwrap() * (1.0 / (n - 1) as f64);
        if total < best.1 {
            best = (i, total);
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut ties = 0;
    let mut graph_gap: f64 = 0.0;
    for case in 0..1000 {
        let n = 2 + case % 3;
        let len = rng.gen_range(16..256);
        let mut sources: Vec<Vec<f64>> = (0..n).map(|_| random_signal(&mut rng, len)).collect();
        if case % 10 == 0 {
            // identical sources force a tie between splits
            sources[n - 1] = sources[0].clone();
            ties += 1;
        }
        let pick = rng.gen_range(0..n);
        let refs: Vec<&[f64]> = sources.iter().map(Vec::as_slice).collect();
        let noise = rng.gen_range(0.0..2.0);
        let one: Vec<f64> = sources[pick].iter().map(|v| v + noise * rng.gen_range(-1.0..1.0)).collect();
        let rest: Vec<f64> = residual_target(&refs, pick).iter().map(|v| v + noise * rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::row(one.clone()).unwrap());
        let b = g.constant(Tensor::row(rest.clone()).unwrap());
        let out = or_pit_loss(&mut g, a, b, &sources).unwrap();
        let (best, total) = brute_force(&one, &rest, &sources);
        if out.best.0 != best || out.breakdown.total.to_bits() != total.to_bits() {
            mismatches += 1;
        }
        graph_gap = graph_gap.max((g.value(out.loss).item() - total).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 10.0 && graph_gap < 1e-9,
        format!("{mismatches}/1000 mismatches ({ties} forced ties), graph value within {graph_gap:.1e}, {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(16..256);
        let s1 = random_signal(&mut rng, len);
        let s2 = random_signal(&mut rng, len);
        let a = random_signal(&mut rng, len);
        let b = random_signal(&mut rng, len);
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::row(a.clone()).unwrap());
        let vb = g.constant(Tensor::row(b.clone()).unwrap());
        let orpit = or_pit_loss(&mut g, va, vb, &[s1.clone(), s2.clone()]).unwrap().breakdown.total;
        let upit = upit_loss_n2(&a, &b, &s1, &s2).unwrap();
        if orpit.to_bits() != upit.to_bits() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/1000 mismatches"))
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let r32 = support::gradient_suite_f32();
    let r64 = support::gradient_suite_f64();
    let secs = t0.elapsed().as_secs_f64();
    fn worst(r: &[(&'static str, f64)]) -> (&'static str, f64) {
        r.iter()
            .cloned()
            .fold(("", 0.0), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a })
    }
    let (w32, w64) = (worst(&r32), worst(&r64));
    outcome(
        w32.1 < support::F32.tol && w64.1 < support::F64.tol && secs < 60.0,
        format!(
            "{} cases; worst 32-bit {:.1e} ({}), worst 64-bit {:.1e} ({}), {secs:.2}s",
            r32.len(),
            w32.1,
            w32.0,
            w64.1,
            w64.0
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for case in 0..200 {
        // dyadic values, power-of-two lengths and dyadic shifts keep the
        // mean subtraction free of rounding
        let len = 1usize << rng.gen_range(3..8);
        let est: Vec<f64> = (0..len).map(|_| rng.gen_range(-64i32..64) as f64 / 8.0).collect();
        let reference: Vec<f64> = (0..len).map(|_| rng.gen_range(-64i32..64) as f64 / 8.0).collect();
        let base = si_snr(&est, &reference).unwrap();
        let k = [0.25, 0.5, 2.0, 4.0, 1024.0][case % 5];
        let scaled: Vec<f64> = est.iter().map(|v| v * k).collect();
        if si_snr(&scaled, &reference).unwrap().to_bits() != base.to_bits() {
            failures.push(format!("scale {k}"));
        }
        let shift = [0.5, -1.0, 3.0, -0.25][case % 4];
        let shifted: Vec<f64> = est.iter().map(|v| v + shift).collect();
        if si_snr(&shifted, &reference).unwrap().to_bits() != base.to_bits() {
            failures.push(format!("shift {shift}"));
        }
    }
    let hand = si_snr(&[1.0, 0.0, 0.0], &[1.0, -1.0, 0.0]).unwrap();
    let expected = 10.0 * 3f64.log10();
    let hand_ok = (hand - expected).abs() < 1e-9;
    failures.truncate(3);
    outcome(
        failures.is_empty() && hand_ok,
        format!(
            "scale/shift exact on 200 cases{}; hand value {hand:.12} dB vs {expected:.12}",
            if failures.is_empty() { String::new() } else { format!(" (broke: {failures:?})") }
        ),
    )
}

struct Shared {
    trained: Trained,
    eval23: Vec<(String, MixtureSample)>,
    eval4: Vec<(String, MixtureSample)>,
    model23: EvalReport,
    eval_seconds: f64,
    train: Vec<MixtureSample>,
}

fn criterion_5(s: &Shared) -> Outcome {
    let ibm = ibm_report(&s.eval23);
    let (m2, m3) = (mean_for(&s.model23, 2), mean_for(&s.model23, 3));
    let (i2, i3) = (mean_for(&ibm, 2), mean_for(&ibm, 3));
    let minutes = (s.trained.train_seconds + s.eval_seconds) / 60.0;
    let failures = s.model23.failures.len();
    outcome(
        m2 >= 5.0 && m3 >= 3.0 && i2 > m2 && i3 > m3 && minutes <= 20.0 && failures == 0,
        format!(
            "2-src {m2:.2} dB, 3-src {m3:.2} dB; IBM {i2:.2} / {i3:.2} dB; train+eval {minutes:.1} min{}",
            if s.trained.cached { " (training time from cache)" } else { "" }
        ),
    )
}

fn criterion_6(s: &Shared) -> Outcome {
    let report = model_report(&s.trained.params, &s.eval4);
    let m4 = mean_for(&report, 4);
    outcome(
        m4 > 0.0 && report.failures.is_empty(),
        format!("4-src oracle-stopped SI-SNRi {m4:.2} dB over {} mixtures", report.records.len()),
    )
}

fn criterion_7(s: &Shared) -> Outcome {
    let three: Vec<MixtureSample> = s.train.iter().filter(|m| m.n_sources() == 3).cloned().collect();
    let cfg = TrainConfig {
        epochs: 2,
        lr: 5e-4,
        seed: TRAIN_SEED,
        val_fraction: 0.05,
        val_limit: 25,
        crop_len: Some(4000),
        ..TrainConfig::default()
    };
    let (tuned, _) = fine_tune_recursive_samples(&s.trained.params, &three, &cfg).expect("fine-tune");
    let eval3: Vec<(String, MixtureSample)> = s.eval23.iter().filter(|(_, m)| m.n_sources() == 3).cloned().collect();
    let before = mean_for(&s.model23, 3);
    let after = mean_for(&model_report(&tuned, &eval3), 3);
    outcome(
        after - before >= 0.2,
        format!("3-src SI-SNRi {before:.2} -> {after:.2} dB ({:+.2})", after - before),
    )
}

fn criterion_8(s: &Shared) -> Outcome {
    let features = FeatureConfig::default();
    let per = s.train.len() / 3;
    let samples = data(COUNTER_DATA_SEED, "count", &[(1, per), (2, per), (3, s.train.len() - 2 * per)]);
    let stopper = cached_classifier("stopper.orp", || {
        let set = build_stop_training_set(&s.trained.params, &samples, &StopSetConfig::default(), 5).unwrap();
        train_binary(&set, features, &classifier_config(), 5).unwrap().0
    });
    let counter = cached_classifier("counter.orp", || {
        train_count_baseline(&samples, 3, features, &classifier_config(), 5).unwrap().0
    });
    let eval = data(COUNT_SEED, "count", &[(1, 200), (2, 200), (3, 200)]);
    let recursive = evaluate_recursive_counting(&s.trained.params, &Arc::new(stopper), &eval, 0.5).unwrap();
    let direct = evaluate_count_baseline(&counter, &eval).unwrap();
    outcome(
        recursive.accuracy >= 0.9 && recursive.accuracy > direct.accuracy,
        format!(
            "recursive {:.1}% (per class {:?}) vs multiclass {:.1}%",
            100.0 * recursive.accuracy,
            recursive.per_class_accuracy.iter().filter(|a| a.is_finite()).map(|a| (a * 1000.0).round() / 10.0).collect::<Vec<_>>(),
            100.0 * direct.accuracy
        ),
    )
}

fn criterion_9(s: &Shared) -> Outcome {
    let cfg = DatasetConfig {
        seed: DOMINANT_SEED,
        ..DatasetConfig::default()
    };
    let rows = dominant_eval(&s.trained.params, &cfg, &[1, 5, 10], 50).unwrap();
    let pass = rows.iter().all(|r| r.mean_si_snr_db > r.mean_mixture_si_snr_db);
    let detail = rows
        .iter()
        .map(|r| format!("k={}: {:.2} vs {:.2} dB", r.interferers, r.mean_si_snr_db, r.mean_mixture_si_snr_db))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn criterion_10(s: &Shared) -> Outcome {
    let records: Vec<_> = s.model23.records.iter().filter(|r| r.n == 3).take(50).collect();
    let (mut first, mut last) = (0.0, 0.0);
    for r in &records {
        for (j, stem) in r.perm.iter().enumerate() {
            match stem {
                Some(0) => first += r.si_snr_db[j],
                Some(2) => last += r.si_snr_db[j],
                _ => {}
            }
        }
    }
    let k = records.len() as f64;
    let (first, last) = (first / k, last / k);
    outcome(
        records.len() == 50 && first >= last,
        format!("first stem {first:.2} dB, last stem {last:.2} dB over {} mixtures", records.len()),
    )
}

fn criterion_11(s: &Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    let w = quantize(&s.eval23[0].1.mixture);
    let path = dir.path().join("roundtrip.wav");
    write_wav(&path, &w).unwrap();
    let back: Waveform = read_wav(&path).unwrap();
    let wav_ok = back.samples().iter().map(|v| v.to_bits()).eq(w.samples().iter().map(|v| v.to_bits()))
        && back.sample_rate() == w.sample_rate();
    notes.push(format!("wav {}", if wav_ok { "bit-exact" } else { "DIFFERS" }));

    let ckpt = dir.path().join("model.orp");
    save_checkpoint(&s.trained.params, &ckpt).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    let x = s.eval23[1].1.mixture.samples();
    let (a1, b1) = forward(&s.trained.params, x).unwrap();
    let (a2, b2) = forward(&loaded, x).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let ckpt_ok = bits(&a1) == bits(&a2) && bits(&b1) == bits(&b2);
    notes.push(format!("checkpoint forward {}", if ckpt_ok { "bit-identical" } else { "DIFFERS" }));

    let small = data(9, "repro", &[(2, 20), (3, 20)]);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 3,
        val_fraction: 0.1,
        crop_len: Some(2000),
        model: SeparatorConfig {
            n_basis: 8,
            mask_channels: 8,
            ..SeparatorConfig::default()
        },
        ..TrainConfig::default()
    };
    let (p1, l1) = train_orpit_samples(&small, &cfg).unwrap();
    let (p2, l2) = train_orpit_samples(&small, &cfg).unwrap();
    let pbits = |p: &SeparatorParams| p.tensors.iter().flat_map(|t| bits(t.data())).collect::<Vec<_>>();
    let train_ok = pbits(&p1) == pbits(&p2) && l1.deterministic_part() == l2.deterministic_part();
    notes.push(format!("fixed-seed training {}", if train_ok { "bitwise reproducible" } else { "DIFFERS" }));

    outcome(wav_ok && ckpt_ok && train_ok, notes.join(", "))
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!(
        "criterion {id:>2} {}: {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results = Vec::new();
    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        report(id, name, &o);
        eprintln!("    ({:.1}s)", t0.elapsed().as_secs_f64());
        results.push((id, o.pass));
    };

    run(1, "OR-PIT equals brute-force split enumeration", &criterion_1);
    run(2, "OR-PIT equals uPIT at N=2", &criterion_2);
    run(3, "finite-difference gradient suite", &criterion_3);
    run(4, "SI-SNR identities", &criterion_4);

    let train = data(TRAIN_SEED, "train", &[(2, 1000), (3, 1000)]);
    let trained = train_separator(&train);
    let t0 = Instant::now();
    let eval23 = labeled(&data(EVAL_SEED, "test", &[(2, 100), (3, 100)]), "test");
    let model23 = model_report(&trained.params, &eval23);
    let eval_seconds = t0.elapsed().as_secs_f64();
    let eval4 = labeled(&data(EVAL_SEED + 1, "test4", &[(4, 100)]), "test4");
    let shared = Shared {
        trained,
        eval23,
        eval4,
        model23,
        eval_seconds,
        train,
    };

    run(5, "toy separation quality", &|| criterion_5(&shared));
    run(6, "generalization to 4 sources", &|| criterion_6(&shared));
    run(7, "fine-tuning improves 3-source quality", &|| criterion_7(&shared));
    run(8, "recursive counting", &|| criterion_8(&shared));
    run(9, "dominant-source trend", &|| criterion_9(&shared));
    run(10, "first-extracted stem is the easiest", &|| criterion_10(&shared));
    run(11, "plumbing exactness", &|| criterion_11(&shared));

    let failed: Vec<usize> = results.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    // FAIL lines are always printed; only strict mode turns them into a failing exit.
    if !failed.is_empty() && std::env::var_os("ORPIT_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
