//! Parametric toy corpus: each accent is a family of harmonic voices.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, CorpusManifest, ManifestEntry, TaskError};
use crate::dsp::write_raw;
use crate::dsp::{Waveform, SAMPLE_RATE};

const PEAK: f64 = 0.5;
const MAX_HARMONIC_HZ: f64 = 3800.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub accents: usize,
    pub speakers_per_accent: usize,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            accents: 20,
            speakers_per_accent: 3,
            seconds: 12.5,
            seed: 0,
        }
    }
}

/// Parameter family shared by the speakers of one synthetic accent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccentFamily {
    /// Fundamental-frequency band in Hz.
    pub f0_band: (f64, f64),
    /// Geometric decay of harmonic amplitudes.
    pub harmonic_decay: f64,
    /// Amplitude-modulation (syllable) rate in Hz.
    pub am_rate: f64,
}

impl AccentFamily {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let lo = 80.0 * (rng.random_range(0.0..1.0f64) * (3.0f64).ln()).exp();
        Self {
            f0_band: (lo, lo * 1.35),
            harmonic_decay: rng.random_range(0.55..0.9),
            am_rate: rng.random_range(2.0..6.0),
        }
    }
}

struct Voice {
    f0: f64,
    amps: Vec<f64>,
    am_rate: f64,
    vibrato_rate: f64,
}

impl Voice {
    fn draw<R: Rng>(family: &AccentFamily, rng: &mut R) -> Self {
        let f0 = rng.random_range(family.f0_band.0..family.f0_band.1);
        let decay = (family.harmonic_decay + rng.random_range(-0.05..0.05)).clamp(0.3, 0.95);
        let n = ((MAX_HARMONIC_HZ / (f0 * 1.1)).floor() as usize).max(1);
        let amps = (0..n)
            .map(|k| {
                let z: f64 = StandardNormal.sample(rng);
                decay.powi(k as i32) * (0.3 * z).exp()
            })
            .collect();
        Self {
            f0,
            amps,
            am_rate: family.am_rate * rng.random_range(0.85..1.15),
            vibrato_rate: rng.random_range(3.0..7.0),
        }
    }
}

/// One utterance of a speaker drawn from `family`; `rng` drives both the
/// speaker's voice and the per-utterance jitter.
pub fn synth_utterance<R: Rng>(family: &AccentFamily, seconds: f64, rng: &mut R) -> Waveform {
    let voice = Voice::draw(family, rng);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let dt = 1.0 / SAMPLE_RATE as f64;
    let am_phase = rng.random_range(0.0..TAU);
    let vib_phase = rng.random_range(0.0..TAU);
    let mut drift = 0.0f64;
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let z: f64 = StandardNormal.sample(rng);
        // slow mean-reverting pitch drift
        drift = 0.9995 * drift + 0.002 * z;
        let f = voice.f0 * (1.0 + 0.03 * (TAU * voice.vibrato_rate * t + vib_phase).sin() + drift.clamp(-0.2, 0.2));
        phase = (phase + TAU * f * dt) % TAU;
        let env = 0.55 + 0.45 * (TAU * voice.am_rate * t + am_phase).sin();
        let mut v = 0.0;
        for (k, a) in voice.amps.iter().enumerate() {
            v += a * ((k + 1) as f64 * phase).sin();
        }
        samples.push(env * v);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for s in &mut samples {
            *s *= PEAK / peak;
        }
    }
    Waveform::new(samples)
}

pub(crate) fn accent_name(i: usize) -> String {
    format!("accent{i:03}")
}

pub(crate) fn speaker_name(i: usize) -> String {
    format!("spk{i:02}")
}

/// Write a synthetic corpus under `out_dir` (raw audio in `audio/` plus
/// `manifest.jsonl`) and return its manifest.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<CorpusManifest, TaskError> {
    if spec.speakers_per_accent < 2 || spec.accents == 0 {
        return Err(TaskError::Manifest(
            "synthetic corpus needs at least one accent and two speakers per accent".into(),
        ));
    }
    let audio = out_dir.join("audio");
    std::fs::create_dir_all(&audio).map_err(|e| TaskError::io(&audio, e))?;
    let mut entries = Vec::new();
    for a in 0..spec.accents {
        let accent = accent_name(a);
        let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &accent));
        let family = AccentFamily::random(&mut frng);
        for s in 0..spec.speakers_per_accent {
            let speaker = speaker_name(s);
            let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("{accent}/{speaker}")));
            let wave = synth_utterance(&family, spec.seconds, &mut srng);
            let rel = format!("audio/{accent}_{speaker}.raw");
            write_raw(&out_dir.join(&rel), &wave)?;
            entries.push(ManifestEntry {
                accent: accent.clone(),
                speaker_id: speaker,
                path: rel,
                samples: wave.len(),
            });
        }
    }
    let manifest = CorpusManifest::new(entries, out_dir);
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
