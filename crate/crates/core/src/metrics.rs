//! Separation quality metrics.
//!
//! All scores are computed in `f64` regardless of the sample type. SI-SNR
//! mean-normalizes both signals, projects the estimate onto the reference
//! and reports `10·log10(‖s_target‖² / ‖e_noise‖²)`, bounded to
//! `±SI_SNR_CAP_DB`.

use crate::signal::dataset::DatasetManifest;
use crate::signal::stft::Stft;
use crate::signal::{MixtureSample, Waveform};
use crate::{par, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const SI_SNR_CAP_DB: f64 = 60.0;
/// Noise (or target) energy below this fraction of the other term saturates the score.
pub const DEN_EPS: f64 = 1e-12;

/// Largest list length accepted by [`best_permutation_score`].
pub const MAX_PERMUTATION_SOURCES: usize = 6;

/// Header line describing the SDR variant used throughout the reports.
pub const SDR_NOTE: &str =
    "sdri_db is projection SDR (optimal scaling of the raw reference, no mean removal), not BSSEval SDR";

#[derive(Clone, Debug, PartialEq)]
pub struct SiSnrBreakdown {
    pub s_target: Vec<f64>,
    pub e_noise: Vec<f64>,
    pub value_db: f64,
}

/// Converts the two energy terms into a bounded dB value.
pub fn bounded_ratio_db(target_energy: f64, noise_energy: f64) -> f64 {
    if target_energy <= DEN_EPS * noise_energy {
        -SI_SNR_CAP_DB
    } else if noise_energy <= DEN_EPS * target_energy {
        SI_SNR_CAP_DB
    } else {
        (10.0 * (target_energy / noise_energy).log10()).clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB)
    }
}

fn to_f64<T: Copy + Into<f64>>(x: &[T]) -> Vec<f64> {
    x.iter().map(|&v| v.into()).collect()
}

fn centered<T: Copy + Into<f64>>(x: &[T]) -> Vec<f64> {
    let v = to_f64(x);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.into_iter().map(|a| a - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::invalid(format!(
            "signals must be non-empty and of equal length ({a} vs {b})"
        )));
    }
    Ok(())
}

fn project(est: Vec<f64>, reference: Vec<f64>) -> Result<SiSnrBreakdown> {
    let ref_energy = dot(&reference, &reference);
    if ref_energy == 0.0 {
        return Err(Error::DegenerateReference(
            "reference has no energy after normalization".into(),
        ));
    }
    let scale = dot(&est, &reference) / ref_energy;
    let s_target: Vec<f64> = reference.iter().map(|r| scale * r).collect();
    let e_noise: Vec<f64> = est.iter().zip(&s_target).map(|(e, t)| e - t).collect();
    let value_db = bounded_ratio_db(dot(&s_target, &s_target), dot(&e_noise, &e_noise));
    Ok(SiSnrBreakdown {
        s_target,
        e_noise,
        value_db,
    })
}

pub fn si_snr_breakdown<T: Copy + Into<f64>>(estimate: &[T], reference: &[T]) -> Result<SiSnrBreakdown> {
    check_lengths(estimate.len(), reference.len())?;
    project(centered(estimate), centered(reference))
}

/// Scale-invariant SNR of `estimate` against `reference`, in dB.
pub fn si_snr<T: Copy + Into<f64>>(estimate: &[T], reference: &[T]) -> Result<f64> {
    si_snr_breakdown(estimate, reference).map(|b| b.value_db)
}

pub fn si_snr_improvement<T: Copy + Into<f64>>(estimate: &[T], reference: &[T], mixture: &[T]) -> Result<f64> {
    check_lengths(mixture.len(), reference.len())?;
    Ok(si_snr(estimate, reference)? - si_snr(mixture, reference)?)
}

/// SNR after optimally scaling the raw (not mean-normalized) reference.
pub fn projection_sdr<T: Copy + Into<f64>>(estimate: &[T], reference: &[T]) -> Result<f64> {
    check_lengths(estimate.len(), reference.len())?;
    project(to_f64(estimate), to_f64(reference)).map(|b| b.value_db)
}

pub fn projection_sdr_improvement<T: Copy + Into<f64>>(
    estimate: &[T],
    reference: &[T],
    mixture: &[T],
) -> Result<f64> {
    Ok(projection_sdr(estimate, reference)? - projection_sdr(mixture, reference)?)
}

/// Visits injective maps `refs → 0..slots` in lexicographic order.
fn for_each_assignment(n_refs: usize, slots: usize, mut visit: impl FnMut(&[usize])) {
    fn rec(pos: usize, cur: &mut Vec<usize>, used: &mut [bool], n: usize, visit: &mut dyn FnMut(&[usize])) {
        if pos == n {
            visit(cur);
            return;
        }
        for s in 0..used.len() {
            if !used[s] {
                used[s] = true;
                cur.push(s);
                rec(pos + 1, cur, used, n, visit);
                cur.pop();
                used[s] = false;
            }
        }
    }
    let mut used = vec![false; slots];
    rec(0, &mut Vec::with_capacity(n_refs), &mut used, n_refs, &mut visit);
}

/// Exhaustive search for the estimate order maximizing mean SI-SNR.
///
/// `perm[j]` is the index of the estimate assigned to reference `j`. Ties go
/// to the lexicographically smallest permutation.
pub fn best_permutation_score(estimates: &[Waveform], references: &[Waveform]) -> Result<(Vec<usize>, f64)> {
    if estimates.len() != references.len() || estimates.is_empty() {
        return Err(Error::invalid(format!(
            "{} estimates vs {} references",
            estimates.len(),
            references.len()
        )));
    }
    if estimates.len() > MAX_PERMUTATION_SOURCES {
        return Err(Error::invalid(format!(
            "at most {MAX_PERMUTATION_SOURCES} sources supported"
        )));
    }
    let scores = score_matrix(estimates, references)?;
    let n = references.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_assignment(n, n, |perm| {
        let mean = perm.iter().enumerate().map(|(j, &i)| scores[j][i]).sum::<f64>() / n as f64;
        if best.as_ref().map_or(true, |(_, b)| mean > *b) {
            best = Some((perm.to_vec(), mean));
        }
    });
    Ok(best.expect("at least one permutation"))
}

/// `scores[j][i]` = SI-SNR of estimate `i` against reference `j`.
fn score_matrix(estimates: &[Waveform], references: &[Waveform]) -> Result<Vec<Vec<f64>>> {
    references
        .iter()
        .map(|r| {
            estimates
                .iter()
                .map(|e| si_snr(e.samples(), r.samples()))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Binary masks: `masks[k][frame][bin]` is 1 where reference `k` has the
/// largest magnitude (ties to the lowest index).
pub fn ibm_masks(references: &[Waveform], window_len: usize, hop: usize) -> Result<Vec<Vec<Vec<u8>>>> {
    let first = references
        .first()
        .ok_or_else(|| Error::invalid("ideal binary mask needs at least one reference"))?;
    for r in &references[1..] {
        first.check_compatible(r)?;
    }
    let stft = Stft::new(window_len, hop)?;
    let specs: Vec<_> = references.iter().map(|r| stft.analyze(r)).collect();
    let (frames, bins) = (specs[0].n_frames(), specs[0].n_bins());
    let mut masks = vec![vec![vec![0u8; bins]; frames]; references.len()];
    for t in 0..frames {
        for b in 0..bins {
            let mut best = 0;
            let mut best_mag = specs[0].frames()[t][b].norm();
            for (k, s) in specs.iter().enumerate().skip(1) {
                let m = s.frames()[t][b].norm();
                if m > best_mag {
                    best = k;
                    best_mag = m;
                }
            }
            masks[best][t][b] = 1;
        }
    }
    Ok(masks)
}

/// Oracle separation: apply each reference's ideal binary mask to the mixture.
pub fn ibm_separate(mixture: &Waveform, references: &[Waveform], window_len: usize, hop: usize) -> Result<Vec<Waveform>> {
    for r in references {
        mixture.check_compatible(r)?;
    }
    let masks = ibm_masks(references, window_len, hop)?;
    let stft = Stft::new(window_len, hop)?;
    let mix_spec = stft.analyze(mixture);
    masks
        .iter()
        .map(|mask| {
            let mut spec = mix_spec.clone();
            for (frame, mrow) in spec.frames_mut().iter_mut().zip(mask) {
                for (c, &m) in frame.iter_mut().zip(mrow) {
                    if m == 0 {
                        *c = Default::default();
                    }
                }
            }
            stft.synthesize(&spec)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub n: usize,
    pub n_stems: usize,
    pub si_snri_db: f64,
    pub sdri_db: f64,
    /// Estimate index per reference; `None` where no stem was left and the
    /// mixture stands in.
    pub perm: Vec<Option<usize>>,
    /// SI-SNR of the aligned estimate for each reference.
    pub si_snr_db: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_si_snri_db: f64,
    pub mean_sdri_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub overall: Aggregate,
    pub per_n: BTreeMap<usize, Aggregate>,
    pub failures: usize,
    pub note: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    /// `(id, error message)` of records that could not be processed.
    pub failures: Vec<(String, String)>,
}

fn aggregate<'a>(records: impl Iterator<Item = &'a EvalRecord>) -> Aggregate {
    let mut a = Aggregate::default();
    let (mut si, mut sd) = (0.0, 0.0);
    for r in records {
        a.count += 1;
        si += r.si_snri_db;
        sd += r.sdri_db;
    }
    if a.count > 0 {
        a.mean_si_snri_db = si / a.count as f64;
        a.mean_sdri_db = sd / a.count as f64;
    }
    a
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        let mut per_n = BTreeMap::new();
        for n in self.records.iter().map(|r| r.n).collect::<std::collections::BTreeSet<_>>() {
            per_n.insert(n, aggregate(self.records.iter().filter(|r| r.n == n)));
        }
        EvalSummary {
            overall: aggregate(self.records.iter()),
            per_n,
            failures: self.failures.len(),
            note: SDR_NOTE.into(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {SDR_NOTE}\nid,n,si_snri_db,sdri_db,perm\n");
        for r in &self.records {
            let perm: Vec<String> = r
                .perm
                .iter()
                .map(|p| p.map_or_else(|| "-".to_string(), |i| i.to_string()))
                .collect();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                r.id,
                r.n,
                r.si_snri_db,
                r.sdri_db,
                perm.join(" ")
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }

    /// Writes `<path>` (CSV) and `<path>.summary.json`.
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json_path = summary_path(csv_path);
        std::fs::write(&json_path, self.summary_json()).map_err(|e| Error::io(&json_path, e))
    }
}

pub fn summary_path(csv_path: &Path) -> std::path::PathBuf {
    let mut name = csv_path.file_name().unwrap_or_default().to_os_string();
    name.push(".summary.json");
    csv_path.with_file_name(name)
}

/// Scores one mixture's stems against its references.
///
/// Stems are aligned to references by exhaustive search on mean SI-SNR. If
/// there are fewer stems than references, unmatched references are scored
/// against the unprocessed mixture (zero improvement).
pub fn score_stems(id: &str, sample: &MixtureSample, stems: &[Waveform]) -> Result<EvalRecord> {
    let refs = &sample.sources;
    let n = refs.len();
    if n == 0 || n > MAX_PERMUTATION_SOURCES || stems.len() > MAX_PERMUTATION_SOURCES {
        return Err(Error::invalid(format!(
            "cannot align {} stems to {n} references",
            stems.len()
        )));
    }
    for s in stems {
        sample.mixture.check_compatible(s)?;
    }
    let mix = sample.mixture.samples();
    let base: Vec<f64> = refs
        .iter()
        .map(|r| si_snr(mix, r.samples()))
        .collect::<Result<_>>()?;
    let scores = score_matrix(stems, refs)?;
    let slots = stems.len().max(n);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_assignment(n, slots, |assign| {
        let total: f64 = assign
            .iter()
            .enumerate()
            .map(|(j, &i)| if i < stems.len() { scores[j][i] } else { base[j] })
            .sum();
        if best.as_ref().map_or(true, |(_, b)| total > *b) {
            best = Some((assign.to_vec(), total));
        }
    });
    let (assign, _) = best.expect("at least one assignment");
    let mut si_snri = 0.0;
    let mut sdri = 0.0;
    let mut per_source = Vec::with_capacity(n);
    for (j, &i) in assign.iter().enumerate() {
        let r = refs[j].samples();
        if i < stems.len() {
            let e = stems[i].samples();
            per_source.push(scores[j][i]);
            si_snri += scores[j][i] - base[j];
            sdri += projection_sdr_improvement(e, r, mix)?;
        } else {
            per_source.push(base[j]);
        }
    }
    Ok(EvalRecord {
        id: id.to_string(),
        n,
        n_stems: stems.len(),
        si_snri_db: si_snri / n as f64,
        sdri_db: sdri / n as f64,
        perm: assign
            .into_iter()
            .map(|i| (i < stems.len()).then_some(i))
            .collect(),
        si_snr_db: per_source,
    })
}

/// Separates and scores in-memory samples; per-record failures are collected.
pub fn evaluate_samples<S>(samples: &[(String, MixtureSample)], separate: S) -> EvalReport
where
    S: Fn(&MixtureSample) -> Result<Vec<Waveform>> + Sync + Send,
{
    let results = par::map(samples, |(id, s)| {
        separate(s).and_then(|stems| score_stems(id, s, &stems))
    });
    collect_report(samples.iter().map(|(id, _)| id.clone()), results)
}

/// Loads, separates and scores every manifest record.
pub fn evaluate_set<S>(manifest: &DatasetManifest, separate: S) -> EvalReport
where
    S: Fn(&MixtureSample) -> Result<Vec<Waveform>> + Sync + Send,
{
    let results = par::map_range(manifest.len(), |i| {
        let id = &manifest.records[i].id;
        manifest
            .load(i)
            .and_then(|s| separate(&s).and_then(|stems| score_stems(id, &s, &stems)))
    });
    collect_report(manifest.records.iter().map(|r| r.id.clone()), results)
}

fn collect_report(ids: impl Iterator<Item = String>, results: Vec<Result<EvalRecord>>) -> EvalReport {
    let mut report = EvalReport::default();
    for (id, r) in ids.zip(results) {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(e) => {
                log::warn!("evaluation of {id} failed: {e}");
                report.failures.push((id, e.to_string()));
            }
        }
    }
    report
}
