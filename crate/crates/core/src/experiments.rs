//! Dominant-source experiment: one loud target plus many attenuated
//! interferers on the −18 dB / −0.5 dB-per-interferer schedule.

use crate::metrics::si_snr;
use crate::model::SeparatorParams;
use crate::par;
use crate::recursion::{separate_recursive, Stopper};
use crate::signal::{dominant_mixture, synth_source, DatasetConfig, MixtureSample};
use crate::{Error, Result};
use rand::Rng;
use serde::Serialize;
use std::fmt::Write as _;

/// Mixture `case` of the `k`-interferer condition. The target comes from a
/// random speaker band; interferers are drawn from any band, with repeats.
pub fn dominant_case(cfg: &DatasetConfig, k: usize, case: usize) -> Result<MixtureSample> {
    let mut rng = cfg.record_rng(k * 1_000_003 + case);
    let n_bands = cfg.bands.len();
    let target = synth_source(
        &cfg.speaker(rng.gen_range(0..n_bands), &mut rng),
        cfg.duration,
        cfg.sample_rate,
    )?;
    let interferers = (0..k)
        .map(|_| {
            let band = rng.gen_range(0..n_bands);
            synth_source(&cfg.speaker(band, &mut rng), cfg.duration, cfg.sample_rate)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = dominant_mixture(&target, &interferers)?;
    let peak = m.mixture.peak();
    Ok(if peak > 0.0 { m.scaled(cfg.mixture_peak / peak) } else { m })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominantRow {
    pub interferers: usize,
    pub cases: usize,
    /// Mean SI-SNR of the first extracted stem against the target.
    pub mean_si_snr_db: f64,
    /// Mean SI-SNR of the unprocessed mixture against the target.
    pub mean_mixture_si_snr_db: f64,
}

/// Runs one separation step per mixture and scores `ŝ^1` against the target.
pub fn dominant_eval(
    params: &SeparatorParams,
    cfg: &DatasetConfig,
    interferer_counts: &[usize],
    per_case: usize,
) -> Result<Vec<DominantRow>> {
    if per_case == 0 || interferer_counts.is_empty() {
        return Err(Error::invalid("dominant-eval needs interferer counts and at least one case"));
    }
    interferer_counts
        .iter()
        .map(|&k| {
            let scores = par::map_range(per_case, |case| -> Result<(f64, f64)> {
                let m = dominant_case(cfg, k, case)?;
                let target = m.sources[0].samples();
                let trace = separate_recursive(params, &m.mixture, &Stopper::fixed(1))?;
                let est = trace.steps[0].one.samples();
                Ok((si_snr(est, target)?, si_snr(m.mixture.samples(), target)?))
            });
            let mut est = 0.0;
            let mut base = 0.0;
            for s in scores {
                let (e, b) = s?;
                est += e;
                base += b;
            }
            Ok(DominantRow {
                interferers: k,
                cases: per_case,
                mean_si_snr_db: est / per_case as f64,
                mean_mixture_si_snr_db: base / per_case as f64,
            })
        })
        .collect()
}

pub fn dominant_csv(rows: &[DominantRow]) -> String {
    let mut s = String::from("interferers,cases,mean_si_snr_db,mean_mixture_si_snr_db\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6}",
            r.interferers, r.cases, r.mean_si_snr_db, r.mean_mixture_si_snr_db
        );
    }
    s
}
