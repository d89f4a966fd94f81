//! Recursive separation: feed the residual back into the separator, one
//! source per step, until a stopping rule fires.

use crate::classifier::{predict_is_source, ClassifierParams};
use crate::model::{separate_long, SeparatorParams};
use crate::signal::Waveform;
use crate::{Error, Result};
use serde::Serialize;
use std::sync::Arc;

pub const DEFAULT_SAFETY_CAP: usize = 8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Inputs quieter than this RMS skip classification and count as one source.
pub const SILENCE_RMS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub enum StopRule {
    /// Run exactly `J` steps.
    Fixed(usize),
    /// The true source count is known; run `N − 1` steps.
    Oracle(usize),
    /// Continue while the classifier says the residual still holds a source.
    Classifier {
        params: Arc<ClassifierParams>,
        threshold: f64,
    },
    /// Run until `limit` and flag the result as truncated.
    MaxCap(usize),
}

#[derive(Clone, Debug)]
pub struct Stopper {
    pub rule: StopRule,
    pub safety_cap: usize,
}

impl Stopper {
    pub fn fixed(j: usize) -> Self {
        Self::with(StopRule::Fixed(j))
    }

    pub fn oracle(n: usize) -> Self {
        Self::with(StopRule::Oracle(n))
    }

    pub fn classifier(params: Arc<ClassifierParams>, threshold: f64) -> Self {
        Self::with(StopRule::Classifier { params, threshold })
    }

    pub fn max_cap(limit: usize) -> Self {
        Self::with(StopRule::MaxCap(limit))
    }

    fn with(rule: StopRule) -> Self {
        Stopper {
            rule,
            safety_cap: DEFAULT_SAFETY_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.safety_cap == 0 {
            return Err(Error::invalid("safety cap must be at least 1"));
        }
        match &self.rule {
            StopRule::Fixed(0) | StopRule::Oracle(0) | StopRule::MaxCap(0) => {
                Err(Error::invalid("stopper counts must be at least 1"))
            }
            StopRule::Classifier { threshold, .. } if !(*threshold > 0.0 && *threshold < 1.0) => {
                Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    fn kind(&self) -> StopKind {
        match self.rule {
            StopRule::Fixed(_) => StopKind::Fixed,
            StopRule::Oracle(_) => StopKind::Oracle,
            StopRule::Classifier { .. } => StopKind::Classifier,
            StopRule::MaxCap(_) => StopKind::MaxCap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopKind {
    Fixed,
    Oracle,
    Classifier,
    MaxCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct RecursionStep {
    pub one: Waveform,
    pub rest: Waveform,
    pub decision: StopDecision,
    pub classifier_prob: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RecursionTrace {
    pub kind: StopKind,
    /// `r̂^0`.
    pub input: Waveform,
    pub steps: Vec<RecursionStep>,
    pub estimated_count: Option<usize>,
    /// The safety cap or a `MaxCap` limit ended the run.
    pub truncated: bool,
    /// Silent input; the count is a default, not a classifier decision.
    pub low_confidence: bool,
    pub terminal: bool,
}

impl RecursionTrace {
    fn new(kind: StopKind, input: Waveform) -> Self {
        RecursionTrace {
            kind,
            input,
            steps: Vec::new(),
            estimated_count: None,
            truncated: false,
            low_confidence: false,
            terminal: false,
        }
    }

    fn finish(&mut self) {
        if let Some(last) = self.steps.last_mut() {
            last.decision = StopDecision::Stop;
        }
        self.terminal = true;
    }

    /// JSON summary; `stem_paths` are listed when the caller wrote stems.
    pub fn to_json(&self, stem_paths: &[String]) -> serde_json::Value {
        let steps: Vec<_> = self
            .steps
            .iter()
            .enumerate()
            .map(|(j, s)| {
                serde_json::json!({
                    "step": j + 1,
                    "decision": s.decision,
                    "classifier_prob": s.classifier_prob,
                    "one_rms": s.one.rms(),
                    "rest_rms": s.rest.rms(),
                })
            })
            .collect();
        serde_json::json!({
            "stopper": self.kind,
            "estimated_count": self.estimated_count,
            "truncated": self.truncated,
            "low_confidence": self.low_confidence,
            "steps": steps,
            "stems": stem_paths,
        })
    }
}

/// One separator application, `r̂^{j−1} ↦ (ŝ^j, r̂^j)`.
pub trait Step: Sync {
    fn step(&self, x: &Waveform) -> Result<(Waveform, Waveform)>;
}

impl<F> Step for F
where
    F: Fn(&Waveform) -> Result<(Waveform, Waveform)> + Sync,
{
    fn step(&self, x: &Waveform) -> Result<(Waveform, Waveform)> {
        self(x)
    }
}

impl Step for SeparatorParams {
    fn step(&self, x: &Waveform) -> Result<(Waveform, Waveform)> {
        separate_long(self, x)
    }
}

pub fn separate_recursive(params: &SeparatorParams, x: &Waveform, stopper: &Stopper) -> Result<RecursionTrace> {
    separate_recursive_with(params, x, stopper)
}

/// [`separate_recursive`] over any step function.
pub fn separate_recursive_with<S: Step + ?Sized>(step: &S, x: &Waveform, stopper: &Stopper) -> Result<RecursionTrace> {
    stopper.validate()?;
    match &stopper.rule {
        StopRule::Classifier { params, threshold } => run(step, x, stopper, |r| {
            let p = predict_is_source(params, r)?;
            Ok((p >= *threshold, Some(p)))
        }),
        _ => run(step, x, stopper, |_| Ok((true, None))),
    }
}

/// Core loop. `judge` returns `(still_source, probability)` for a residual.
pub(crate) fn run<S, J>(step: &S, x: &Waveform, stopper: &Stopper, judge: J) -> Result<RecursionTrace>
where
    S: Step + ?Sized,
    J: Fn(&Waveform) -> Result<(bool, Option<f64>)>,
{
    let kind = stopper.kind();
    let cap = stopper.safety_cap;
    let mut trace = RecursionTrace::new(kind, x.clone());
    let planned = match stopper.rule {
        StopRule::Fixed(j) => Some(j),
        StopRule::Oracle(n) => Some(n - 1),
        StopRule::MaxCap(l) => Some(l),
        StopRule::Classifier { .. } => None,
    };
    let silent = kind == StopKind::Classifier && x.rms() < SILENCE_RMS;
    let mut residual = x.clone();
    loop {
        let j = trace.steps.len();
        if let Some(p) = planned {
            if j >= p.min(cap) {
                trace.truncated = j < p || kind == StopKind::MaxCap;
                if kind == StopKind::Oracle {
                    trace.estimated_count = Some(j + 1);
                }
                trace.finish();
                return Ok(trace);
            }
        } else if j >= cap {
            trace.truncated = true;
            trace.estimated_count = Some(cap);
            trace.finish();
            return Ok(trace);
        }
        let (one, rest) = match step.step(&residual) {
            Ok(pair) => pair,
            Err(Error::Numeric(_)) => {
                return Err(Error::NonFiniteStep {
                    step: j + 1,
                    partial: Box::new(trace),
                })
            }
            Err(e) => return Err(e),
        };
        if one.samples().iter().chain(rest.samples()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStep {
                step: j + 1,
                partial: Box::new(trace),
            });
        }
        residual = rest.clone();
        trace.steps.push(RecursionStep {
            one,
            rest,
            decision: StopDecision::Continue,
            classifier_prob: None,
        });
        if kind == StopKind::Classifier {
            if silent {
                trace.low_confidence = true;
                trace.estimated_count = Some(1);
                trace.finish();
                return Ok(trace);
            }
            let (go_on, prob) = judge(&residual)?;
            trace.steps.last_mut().unwrap().classifier_prob = prob;
            if !go_on {
                trace.estimated_count = Some(j + 1);
                trace.finish();
                return Ok(trace);
            }
        }
    }
}

/// Output stems of a finished trace.
///
/// Oracle stopping adds the final residual as the last source; every other
/// rule returns the extracted `ŝ^1..ŝ^J` only.
pub fn stems_from_trace(trace: &RecursionTrace) -> Result<Vec<Waveform>> {
    if !trace.terminal {
        return Err(Error::invalid("recursion trace is not terminal"));
    }
    let mut stems: Vec<Waveform> = trace.steps.iter().map(|s| s.one.clone()).collect();
    if trace.kind == StopKind::Oracle {
        stems.push(
            trace
                .steps
                .last()
                .map_or_else(|| trace.input.clone(), |s| s.rest.clone()),
        );
    }
    Ok(stems)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountEstimate {
    pub count: usize,
    pub truncated: bool,
    pub low_confidence: bool,
}

pub fn estimate_count(
    params: &SeparatorParams,
    x: &Waveform,
    classifier: Arc<ClassifierParams>,
    threshold: f64,
) -> Result<CountEstimate> {
    let trace = separate_recursive(params, x, &Stopper::classifier(classifier, threshold))?;
    Ok(CountEstimate {
        count: trace.estimated_count.unwrap_or(trace.steps.len()),
        truncated: trace.truncated,
        low_confidence: trace.low_confidence,
    })
}
