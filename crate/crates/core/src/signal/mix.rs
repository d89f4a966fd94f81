use super::Waveform;
use crate::{Error, Result};

/// First interferer level below the target in the dominant-source setup, dB.
pub const DOMINANT_FIRST_DB: f64 = 18.0;
/// Additional attenuation of each further interferer, dB.
pub const DOMINANT_STEP_DB: f64 = 0.5;

/// A mixture together with its constituent (already gained) sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    /// Level of source 1 over source k in dB; the first entry is 0.
    pub gains_db: Vec<f64>,
}

impl MixtureSample {
    /// Builds a sample whose mixture is the sample-wise sum of `sources`.
    pub fn from_sources(sources: Vec<Waveform>, gains_db: Vec<f64>) -> Result<Self> {
        if sources.len() != gains_db.len() {
            return Err(Error::invalid("one gain per source required"));
        }
        let mixture = Waveform::sum(&sources)?;
        Ok(MixtureSample {
            mixture,
            sources,
            gains_db,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    /// Multiplies mixture and sources by the same factor.
    pub fn scaled(&self, gain: f32) -> MixtureSample {
        MixtureSample {
            mixture: self.mixture.scaled(gain),
            sources: self.sources.iter().map(|s| s.scaled(gain)).collect(),
            gains_db: self.gains_db.clone(),
        }
    }

    /// Largest deviation between the mixture and the sum of its sources.
    pub fn sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, &m) in self.mixture.samples().iter().enumerate() {
            let s: f64 = self.sources.iter().map(|w| w.samples()[i] as f64).sum();
            worst = worst.max((m as f64 - s).abs());
        }
        worst
    }
}

/// Scales source k by `(‖s₁‖/‖s_k‖)·10^(−g_k/20)` so that it sits `g_k` dB
/// below source 1, then sums.
pub fn mix_at_snr(sources: &[Waveform], snr_db: &[f64]) -> Result<MixtureSample> {
    if sources.is_empty() || sources.len() != snr_db.len() {
        return Err(Error::invalid(format!(
            "{} sources but {} levels",
            sources.len(),
            snr_db.len()
        )));
    }
    let reference = &sources[0];
    for s in &sources[1..] {
        reference.check_compatible(s)?;
    }
    let norms: Vec<f64> = sources.iter().map(|s| s.energy().sqrt()).collect();
    if let Some(k) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::invalid(format!("source {} has zero energy", k + 1)));
    }
    let scaled: Vec<Waveform> = sources
        .iter()
        .zip(&norms)
        .zip(snr_db)
        .enumerate()
        .map(|(k, ((s, &n), &g))| {
            if k == 0 {
                s.clone()
            } else {
                let a = (norms[0] / n) * 10f64.powf(-g / 20.0);
                let samples = s.samples().iter().map(|&v| (v as f64 * a) as f32).collect();
                Waveform::new(samples, s.sample_rate()).expect("scaled finite source")
            }
        })
        .collect();
    let mut gains = snr_db.to_vec();
    gains[0] = 0.0;
    MixtureSample::from_sources(scaled, gains)
}

/// Target plus interferers at −18, −18.5, −19, … dB relative to the target.
pub fn dominant_mixture(target: &Waveform, interferers: &[Waveform]) -> Result<MixtureSample> {
    let mut sources = Vec::with_capacity(interferers.len() + 1);
    sources.push(target.clone());
    sources.extend_from_slice(interferers);
    let levels: Vec<f64> = std::iter::once(0.0)
        .chain((0..interferers.len()).map(dominant_level_db))
        .collect();
    mix_at_snr(&sources, &levels)
}

/// Attenuation of the interferer with zero-based index `k`.
pub fn dominant_level_db(k: usize) -> f64 {
    DOMINANT_FIRST_DB + DOMINANT_STEP_DB * k as f64
}

/// Level of `a` over `b` in dB.
pub fn level_ratio_db(a: &Waveform, b: &Waveform) -> f64 {
    10.0 * (a.energy() / b.energy()).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(v: &[f32]) -> Waveform {
        Waveform::new(v.to_vec(), 8000).unwrap()
    }

    #[test]
    fn equal_power_zero_db_keeps_gain_one() {
        let m = mix_at_snr(&[w(&[1.0, -1.0]), w(&[-1.0, 1.0])], &[0.0, 0.0]).unwrap();
        assert_eq!(m.sources[1].samples(), &[-1.0, 1.0]);
    }

    #[test]
    fn hand_evaluated_gain() {
        let g = 10.0 * 4f64.log10();
        let m = mix_at_snr(&[w(&[1.0, -1.0]), w(&[2.0, 2.0])], &[0.0, g]).unwrap();
        let s2 = m.sources[1].samples();
        assert!((s2[0] - 0.5).abs() < 1e-7 && (s2[1] - 0.5).abs() < 1e-7);
        assert!(m.sum_error() < 1e-6);
    }

    #[test]
    fn zero_energy_rejected() {
        assert!(mix_at_snr(&[w(&[1.0, 0.0]), w(&[0.0, 0.0])], &[0.0, 0.0]).is_err());
        assert!(mix_at_snr(&[w(&[1.0, 0.0])], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn dominant_schedule() {
        assert_eq!(dominant_level_db(0), 18.0);
        assert_eq!(dominant_level_db(4), 20.0);
        let t = w(&[0.5, -0.25, 0.1, 0.3]);
        let alone = dominant_mixture(&t, &[]).unwrap();
        assert_eq!(alone.mixture, t);
        let i = vec![w(&[0.1, 0.2, 0.3, 0.4]); 5];
        let m = dominant_mixture(&t, &i).unwrap();
        assert!((level_ratio_db(&m.sources[0], &m.sources[1]) - 18.0).abs() < 1e-5);
        assert!((level_ratio_db(&m.sources[0], &m.sources[5]) - 20.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn requested_level_is_met(
            a in proptest::collection::vec(-1.0f32..1.0, 64),
            b in proptest::collection::vec(-1.0f32..1.0, 64),
            g in -10.0f64..10.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let m = mix_at_snr(&[w(&a), w(&b)], &[0.0, g]).unwrap();
            // re-measure in f64 from the stored f32 samples
            let measured = level_ratio_db(&m.sources[0], &m.sources[1]);
            prop_assert!((measured - g).abs() < 1e-6, "measured {} requested {}", measured, g);
            prop_assert!(m.sum_error() < 1e-6);
        }
    }
}
