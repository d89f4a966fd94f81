//! One-and-rest permutation invariant training objective.
//!
//! For N reference sources there are exactly N candidate splits: source `i`
//! as the single target and the sum of all others as the residual target.
//! Each split is scored as
//!
//! ```text
//! −SI-SNR(est_one, s_i) + (1/(N−1)) · (−SI-SNR(est_rest, Σ_{n≠i} s_n))
//! ```
//!
//! and the lowest score wins (ties to the lowest `i`). Split scores are
//! computed in `f64` from the tensor values; only the winning split is
//! recorded on the graph, so gradients flow through it alone.

use crate::metrics::{bounded_ratio_db, si_snr, DEN_EPS, SI_SNR_CAP_DB};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Zero-based index of the source chosen as "one".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitAssignment(pub usize);

impl SplitAssignment {
    pub fn one_based(self) -> usize {
        self.0 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// `−SI-SNR(est_one, s_i)` per split.
    pub one_terms: Vec<f64>,
    /// `−SI-SNR(est_rest, Σ_{n≠i} s_n)` per split, before weighting.
    pub rest_terms: Vec<f64>,
    /// `one_terms[i] + rest_terms[i] / (N−1)`.
    pub split_totals: Vec<f64>,
    pub best: SplitAssignment,
    pub total: f64,
}

pub struct OrPitOutput {
    pub loss: Var,
    pub best: SplitAssignment,
    pub breakdown: LossBreakdown,
}

/// Residual target of split `i`: the sum of every source except `i`.
pub fn residual_target(sources: &[&[f64]], i: usize) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    for (k, s) in sources.iter().enumerate() {
        if k == i {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(s.to_vec()),
            Some(a) => a.iter_mut().zip(s.iter()).for_each(|(x, y)| *x += y),
        }
    }
    acc.expect("at least two sources")
}

/// Scores all N splits without touching a graph.
pub fn score_splits(est_one: &[f64], est_rest: &[f64], sources: &[&[f64]]) -> Result<LossBreakdown> {
    let n = sources.len();
    if n < 2 {
        return Err(Error::invalid(format!("OR-PIT needs at least 2 sources, got {n}")));
    }
    let len = est_one.len();
    if est_rest.len() != len || sources.iter().any(|s| s.len() != len) {
        return Err(Error::invalid("OR-PIT signals must share one length"));
    }
    let weight = 1.0 / (n - 1) as f64;
    let mut one_terms = Vec::with_capacity(n);
    let mut rest_terms = Vec::with_capacity(n);
    let mut split_totals = Vec::with_capacity(n);
    for i in 0..n {
        let one = -si_snr(est_one, sources[i])?;
        let rest = -si_snr(est_rest, &residual_target(sources, i))?;
        one_terms.push(one);
        rest_terms.push(rest);
        split_totals.push(one + rest * weight);
    }
    let mut best = 0;
    for i in 1..n {
        if split_totals[i] < split_totals[best] {
            best = i;
        }
    }
    Ok(LossBreakdown {
        total: split_totals[best],
        best: SplitAssignment(best),
        one_terms,
        rest_terms,
        split_totals,
    })
}

/// Differentiable SI-SNR (dB) of `estimate` against a constant `reference`.
///
/// In the saturated regimes the result is a constant node, matching
/// [`crate::metrics::si_snr`].
pub fn graph_si_snr<F: Real>(g: &mut Graph<F>, estimate: Var, reference: &[f64]) -> Result<Var> {
    let shape = g.value(estimate).shape().to_vec();
    if g.value(estimate).len() != reference.len() {
        return Err(Error::invalid("estimate and reference lengths differ"));
    }
    let mean = reference.iter().sum::<f64>() / reference.len() as f64;
    let centered: Vec<f64> = reference.iter().map(|r| r - mean).collect();
    let ref_energy: f64 = centered.iter().map(|r| r * r).sum();
    if ref_energy == 0.0 {
        return Err(Error::DegenerateReference(
            "split target has no energy after normalization".into(),
        ));
    }
    let ones = g.constant(Tensor::full(&shape, F::one()));
    let target = g.constant(Tensor::new(shape, centered.iter().map(|&v| F::of(v)).collect())?);
    let mu = g.mean(estimate)?;
    let offset = g.scalar_mul(ones, mu)?;
    let est_c = g.sub(estimate, offset)?;
    let proj = g.dot(est_c, target)?;
    let scale = g.scale(proj, F::of(1.0 / ref_energy))?;
    let s_target = g.scalar_mul(target, scale)?;
    let e_noise = g.sub(est_c, s_target)?;
    let st2 = g.l2_norm_sq(s_target)?;
    let en2 = g.l2_norm_sq(e_noise)?;
    let (st2v, en2v) = (g.value(st2).item().as_f64(), g.value(en2).item().as_f64());
    let saturated = st2v <= DEN_EPS * en2v || en2v <= DEN_EPS * st2v;
    let raw = 10.0 * (st2v / en2v).log10();
    if saturated || raw.abs() >= SI_SNR_CAP_DB {
        return Ok(g.constant(Tensor::scalar(F::of(bounded_ratio_db(st2v, en2v)))));
    }
    let ls = g.log10(st2)?;
    let le = g.log10(en2)?;
    let d = g.sub(ls, le)?;
    g.scale(d, F::of(10.0))
}

/// OR-PIT loss on `g`. `sources` are constant references; `est_one` and
/// `est_rest` are the separator's two output channels.
pub fn or_pit_loss<F: Real>(
    g: &mut Graph<F>,
    est_one: Var,
    est_rest: Var,
    sources: &[Vec<f64>],
) -> Result<OrPitOutput> {
    let one: Vec<f64> = g.value(est_one).data().iter().map(|v| v.as_f64()).collect();
    let rest: Vec<f64> = g.value(est_rest).data().iter().map(|v| v.as_f64()).collect();
    let refs: Vec<&[f64]> = sources.iter().map(Vec::as_slice).collect();
    let breakdown = score_splits(&one, &rest, &refs)?;
    let i = breakdown.best.0;
    let n = sources.len();
    let one_db = graph_si_snr(g, est_one, &sources[i])?;
    let rest_db = graph_si_snr(g, est_rest, &residual_target(&refs, i))?;
    // −one − rest/(N−1)
    let neg_one = g.scale(one_db, -F::one())?;
    let neg_rest = g.scale(rest_db, F::of(-1.0 / (n - 1) as f64))?;
    let loss = g.add(neg_one, neg_rest)?;
    Ok(OrPitOutput {
        loss,
        best: breakdown.best,
        breakdown,
    })
}

/// Utterance-level PIT for two outputs: the better of the two channel
/// assignments of summed negative SI-SNR.
pub fn upit_loss_n2(est_a: &[f64], est_b: &[f64], s1: &[f64], s2: &[f64]) -> Result<f64> {
    let straight = -(si_snr(est_a, s1)? + si_snr(est_b, s2)?);
    let swapped = -(si_snr(est_a, s2)? + si_snr(est_b, s1)?);
    Ok(if swapped < straight { swapped } else { straight })
}
