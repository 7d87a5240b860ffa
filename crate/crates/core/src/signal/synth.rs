//! Synthetic ship-noise recordings: per-class tonal lines over broadband
//! Gaussian noise. Used for desk-scale runs where the real recordings are
//! not available.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Recording, ShipType, SignalError, SplitTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub type_label: ShipType,
    #[serde(default)]
    pub tones: Vec<Tone>,
    #[serde(default)]
    pub noise_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub recordings_per_class: usize,
    pub classes: Vec<SynthClass>,
    /// Per-recording gain is drawn from `1 ± gain_jitter`.
    #[serde(default)]
    pub gain_jitter: f64,
}

impl SynthSpec {
    /// Three classes spread over three size categories, 8 kHz.
    pub fn desk() -> Self {
        SynthSpec {
            sample_rate: 8000,
            duration_s: 6.0,
            recordings_per_class: 8,
            gain_jitter: 0.2,
            classes: vec![
                SynthClass {
                    type_label: ShipType::NaturalNoise,
                    tones: vec![],
                    noise_level: 0.3,
                },
                SynthClass {
                    type_label: ShipType::Motorboat,
                    tones: vec![
                        Tone {
                            freq_hz: 440.0,
                            amplitude: 0.5,
                        },
                        Tone {
                            freq_hz: 1250.0,
                            amplitude: 0.3,
                        },
                    ],
                    noise_level: 0.2,
                },
                SynthClass {
                    type_label: ShipType::Dredger,
                    tones: vec![
                        Tone {
                            freq_hz: 700.0,
                            amplitude: 0.5,
                        },
                        Tone {
                            freq_hz: 2100.0,
                            amplitude: 0.3,
                        },
                    ],
                    noise_level: 0.2,
                },
            ],
        }
    }

    fn validate(&self) -> Result<(), SignalError> {
        if self.classes.len() < 2 {
            return Err(SignalError::AmbiguousSpec("need at least 2 classes".into()));
        }
        if self.sample_rate == 0 || !(self.duration_s > 0.0) {
            return Err(SignalError::InvalidArgument(
                "sample rate and duration must be positive".into(),
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let mut labels = BTreeSet::new();
        let mut signatures = BTreeSet::new();
        for c in &self.classes {
            if !labels.insert(c.type_label) {
                return Err(SignalError::AmbiguousSpec(format!(
                    "type {} listed twice",
                    c.type_label
                )));
            }
            if c.tones.iter().any(|t| !(t.freq_hz > 0.0 && t.freq_hz < nyquist)) {
                return Err(SignalError::InvalidArgument(format!(
                    "class {} has a tone outside (0, {nyquist}) Hz",
                    c.type_label
                )));
            }
            let mut sig: Vec<u64> = c.tones.iter().map(|t| t.freq_hz.to_bits()).collect();
            sig.sort_unstable();
            if !signatures.insert(sig) {
                return Err(SignalError::AmbiguousSpec(format!(
                    "class {} shares its tonal signature with another class",
                    c.type_label
                )));
            }
        }
        Ok(())
    }
}

/// Generates `recordings_per_class` recordings per class, ids `1..`, class
/// by class. A pure function of `(spec, seed)`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<Recording>, SignalError> {
    spec.validate()?;
    let fs = spec.sample_rate as f64;
    let n = (spec.duration_s * fs).round() as usize;
    let mut out = Vec::with_capacity(spec.classes.len() * spec.recordings_per_class);
    let mut id = 1u32;
    for class in &spec.classes {
        for _ in 0..spec.recordings_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id as u64);
            let gain = 1.0 + spec.gain_jitter * (2.0 * rng.random::<f64>() - 1.0);
            let phases: Vec<f64> = class
                .tones
                .iter()
                .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                .collect();
            let mut samples: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let tonal: f64 = class
                        .tones
                        .iter()
                        .zip(&phases)
                        .map(|(tone, ph)| tone.amplitude * (std::f64::consts::TAU * tone.freq_hz * t + ph).sin())
                        .sum();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    gain * (tonal + class.noise_level * noise)
                })
                .collect();
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 1.0 {
                samples.iter_mut().for_each(|v| *v /= peak);
            }
            out.push(Recording::new(id, samples, spec.sample_rate, class.type_label)?);
            id += 1;
        }
    }
    Ok(out)
}

/// Recording-level split for synthetic data: the last `test_per_class`
/// recordings of each class go to test.
pub fn synth_split_table(recordings: &[Recording], test_per_class: usize) -> BTreeMap<u32, SplitTag> {
    let mut by_class: BTreeMap<ShipType, Vec<u32>> = BTreeMap::new();
    for r in recordings {
        by_class.entry(r.type_label).or_default().push(r.id);
    }
    let mut table = BTreeMap::new();
    for ids in by_class.values() {
        let cut = ids.len().saturating_sub(test_per_class);
        for (i, &id) in ids.iter().enumerate() {
            table.insert(id, if i < cut { SplitTag::Train } else { SplitTag::Test });
        }
    }
    table
}
