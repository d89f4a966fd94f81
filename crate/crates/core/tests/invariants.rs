use orpit_core::checkpoint::Container;
use orpit_core::loss::{graph_si_snr, residual_target, score_splits, upit_loss_n2};
use orpit_core::metrics::si_snr;
use orpit_core::model::overlap_add;
use orpit_core::par;
use orpit_core::recursion::{separate_recursive_with, stems_from_trace, Stopper};
use orpit_core::signal::wav::quantize;
use orpit_core::tensor::{Graph, Tensor};
use orpit_core::{Result, Waveform};
use proptest::collection::vec;
use proptest::prelude::*;

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-1.0f64..1.0, len)
}

fn sources(len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=4).prop_flat_map(move |n| vec(signal(len), n))
}

/// Splits its input into a fixed fraction and the remainder.
fn fraction_step(x: &Waveform) -> Result<(Waveform, Waveform)> {
    let one: Vec<f32> = x.samples().iter().map(|v| v * 0.5).collect();
    let rest: Vec<f32> = x.samples().iter().zip(&one).map(|(a, b)| a - b).collect();
    Ok((Waveform::new(one, x.sample_rate())?, Waveform::new(rest, x.sample_rate())?))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_choice_is_the_minimum(one in signal(32), rest in signal(32), srcs in sources(32)) {
        let refs: Vec<&[f64]> = srcs.iter().map(|s| s.as_slice()).collect();
        let b = score_splits(&one, &rest, &refs).unwrap();
        let min = b.split_totals.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(b.total, min);
        let first = b.split_totals.iter().position(|&t| t == min).unwrap();
        prop_assert_eq!(b.best.0, first);
    }

    #[test]
    fn split_choice_follows_source_order(one in signal(32), rest in signal(32), srcs in sources(32)) {
        let refs: Vec<&[f64]> = srcs.iter().map(|s| s.as_slice()).collect();
        let b = score_splits(&one, &rest, &refs).unwrap();
        let mut sorted = b.split_totals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assume!(sorted[1] - sorted[0] > 1e-9);
        let reversed: Vec<&[f64]> = refs.iter().rev().cloned().collect();
        let r = score_splits(&one, &rest, &reversed).unwrap();
        prop_assert_eq!(r.best.0, refs.len() - 1 - b.best.0);
        prop_assert!((r.total - b.total).abs() < 1e-9);
    }

    #[test]
    fn two_sources_match_utterance_pit(a in signal(32), b in signal(32), s1 in signal(32), s2 in signal(32)) {
        let total = score_splits(&a, &b, &[&s1, &s2]).unwrap().total;
        prop_assert_eq!(total, upit_loss_n2(&a, &b, &s1, &s2).unwrap());
    }

    #[test]
    fn residual_target_is_sum_of_others(srcs in sources(16), pick in 0usize..4) {
        let refs: Vec<&[f64]> = srcs.iter().map(|s| s.as_slice()).collect();
        let i = pick % refs.len();
        let r = residual_target(&refs, i);
        for t in 0..16 {
            let want: f64 = srcs.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, s)| s[t]).sum();
            prop_assert!((r[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_si_snr_matches_metric(est in signal(48), reference in signal(48)) {
        let want = si_snr(&est, &reference);
        prop_assume!(want.is_ok());
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::row(est).unwrap());
        let v = graph_si_snr(&mut g, x, &reference).unwrap();
        prop_assert!((g.value(v).data()[0] - want.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn overlap_add_of_identity_reconstructs(x in vec(-1.0f32..1.0, 1..400), half in 2usize..40) {
        let seg = 2 * half;
        let (one, rest) = overlap_add(&x, seg, |s| Ok((s.to_vec(), s.iter().map(|v| -v).collect()))).unwrap();
        prop_assert_eq!(one.len(), x.len());
        for ((a, b), v) in one.iter().zip(&rest).zip(&x) {
            prop_assert!((a - v).abs() < 1e-6);
            prop_assert!((b + v).abs() < 1e-6);
        }
    }

    #[test]
    fn overlap_add_keeps_constants_exact(c in -1.0f32..1.0, len in 1usize..300, half in 2usize..32) {
        let x = vec![c; len];
        let (one, _) = overlap_add(&x, 2 * half, |s| Ok((s.to_vec(), s.to_vec()))).unwrap();
        prop_assert_eq!(one, x);
    }

    #[test]
    fn oracle_stems_count_and_sum(x in vec(-1.0f32..1.0, 8..64), n in 1usize..6) {
        let w = Waveform::new(x.clone(), 8000).unwrap();
        let trace = separate_recursive_with(&fraction_step, &w, &Stopper::oracle(n)).unwrap();
        prop_assert_eq!(trace.steps.len(), n - 1);
        let stems = stems_from_trace(&trace).unwrap();
        prop_assert_eq!(stems.len(), n);
        for (t, v) in x.iter().enumerate() {
            let s: f32 = stems.iter().map(|w| w.samples()[t]).sum();
            prop_assert!((s - v).abs() < 1e-5);
        }
    }

    #[test]
    fn fixed_stems_exclude_residual(x in vec(-1.0f32..1.0, 8..64), j in 1usize..6) {
        let w = Waveform::new(x, 8000).unwrap();
        let trace = separate_recursive_with(&fraction_step, &w, &Stopper::fixed(j)).unwrap();
        prop_assert_eq!(trace.steps.len(), j);
        prop_assert_eq!(stems_from_trace(&trace).unwrap().len(), j);
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in vec(-10.0f32..10.0, 1..50), flip in any::<prop::sample::Index>()) {
        let mut c = Container::new("test");
        c.set("note", "x");
        c.push("w", Tensor::row(vals.clone()).unwrap());
        let bytes = c.to_bytes();
        prop_assert_eq!(&Container::from_bytes(&bytes).unwrap(), &c);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x01;
        prop_assert!(Container::from_bytes(&bad).is_err());
    }

    #[test]
    fn quantization_is_idempotent(x in vec(-1.5f32..1.5, 1..64)) {
        let q = quantize(&Waveform::new(x, 8000).unwrap());
        let again = quantize(&q);
        prop_assert_eq!(again.samples(), q.samples());
    }

    #[test]
    fn parallel_map_matches_sequential(xs in vec(-1e3f64..1e3, 0..200)) {
        let f = |v: &f64| (v * 1.5).sin() + v.abs().sqrt();
        prop_assert_eq!(par::map(&xs, f), par::map_sequential(&xs, f));
    }
}
