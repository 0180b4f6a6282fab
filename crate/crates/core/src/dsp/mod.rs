//! Signal-level math: segmentation, SNR-controlled mixing, noise
//! injection and scale-invariant SNR.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_audio, read_raw, read_wav, write_raw, write_wav, AudioError};

/// Pipeline sample rate in Hz.
pub const SAMPLE_RATE: u32 = 8000;
/// Segment duration in seconds.
pub const SEGMENT_SECONDS: f64 = 4.0;
/// Samples in one segment at [`SAMPLE_RATE`].
pub const SEGMENT_SAMPLES: usize = 32_000;
/// Energy-ratio floor of the Si-SNR; caps the metric at ±80 dB.
pub const SI_SNR_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("utterance of {samples} samples is shorter than one {seconds} s segment")]
    TooShort { samples: usize, seconds: f64 },
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("{0} has zero energy")]
    ZeroEnergy(&'static str),
    #[error("sample rate mismatch: {0} vs {1}")]
    RateMismatch(u32, u32),
    #[error("non-finite parameter: {0}")]
    NonFinite(&'static str),
}

/// A mono waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.rate)
    }
}

/// A two-source mixture together with the (scaled) sources that sum to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePair {
    pub mixture: Waveform,
    pub sources: [Waveform; 2],
    pub snr_db: f64,
    pub noise_snr_db: Option<f64>,
    /// The additive noise, when present; `mixture = s1 + s2 + noise`.
    pub noise: Option<Waveform>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `10·log10(a / b)` for energies.
pub fn db_ratio(a: f64, b: f64) -> f64 {
    10.0 * (a / b).log10()
}

/// Non-overlapping consecutive segments of `seconds`; a shorter tail is dropped.
pub fn segment(utterance: &Waveform, seconds: f64) -> Result<Vec<Waveform>, DspError> {
    let len = (seconds * f64::from(utterance.rate)).round() as usize;
    if len == 0 || utterance.len() < len {
        return Err(DspError::TooShort {
            samples: utterance.len(),
            seconds,
        });
    }
    Ok(utterance
        .samples
        .chunks_exact(len)
        .map(|c| Waveform {
            samples: c.to_vec(),
            rate: utterance.rate,
        })
        .collect())
}

/// Mix `s1` with `s2` rescaled so that `10·log10(‖s1‖² / ‖g·s2‖²) = snr_db`.
///
/// The stored sources are `(s1, g·s2)`, so the mixture is exactly their sum.
pub fn mix_at_snr(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<MixturePair, DspError> {
    if s1.len() != s2.len() {
        return Err(DspError::LengthMismatch(s1.len(), s2.len()));
    }
    if s1.rate != s2.rate {
        return Err(DspError::RateMismatch(s1.rate, s2.rate));
    }
    if !snr_db.is_finite() {
        return Err(DspError::NonFinite("snr_db"));
    }
    let (e1, e2) = (s1.energy(), s2.energy());
    if e1 == 0.0 {
        return Err(DspError::ZeroEnergy("first source"));
    }
    if e2 == 0.0 {
        return Err(DspError::ZeroEnergy("second source"));
    }
    let gain = (e1 / (e2 * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = s2.samples.iter().map(|v| gain * v).collect();
    let mixture: Vec<f64> = s1.samples.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok(MixturePair {
        mixture: Waveform {
            samples: mixture,
            rate: s1.rate,
        },
        sources: [
            s1.clone(),
            Waveform {
                samples: scaled,
                rate: s1.rate,
            },
        ],
        snr_db,
        noise_snr_db: None,
        noise: None,
    })
}

/// Add white Gaussian noise at `noise_snr_db` relative to the mixture.
///
/// `f64::INFINITY` disables the noise and returns the pair unchanged. The
/// noise depends only on `seed` and the mixture length and energy.
pub fn add_noise(pair: &MixturePair, noise_snr_db: f64, seed: u64) -> Result<MixturePair, DspError> {
    if noise_snr_db == f64::INFINITY {
        return Ok(pair.clone());
    }
    if !noise_snr_db.is_finite() {
        return Err(DspError::NonFinite("noise_snr_db"));
    }
    let e_mix = pair.mixture.energy();
    if e_mix == 0.0 {
        return Err(DspError::ZeroEnergy("mixture"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..pair.mixture.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let centered: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let gain = (e_mix / (energy(&centered) * 10f64.powf(noise_snr_db / 10.0))).sqrt();
    let noise: Vec<f64> = centered.iter().map(|v| gain * v).collect();
    let mut out = pair.clone();
    for (m, n) in out.mixture.samples.iter_mut().zip(&noise) {
        *m += n;
    }
    out.noise_snr_db = Some(noise_snr_db);
    out.noise = Some(Waveform {
        samples: noise,
        rate: pair.mixture.rate,
    });
    Ok(out)
}

/// Noise added to a mixture in the noisy condition: white Gaussian at an
/// SNR drawn uniformly from `snr_db_range` per mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePolicy {
    pub snr_db_range: (f64, f64),
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self {
            snr_db_range: (10.0, 20.0),
        }
    }
}

impl NoisePolicy {
    pub fn apply(&self, pair: &MixturePair, seed: u64) -> Result<MixturePair, DspError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = self.snr_db_range;
        let snr = if lo < hi { rng.random_range(lo..hi) } else { lo };
        add_noise(pair, snr, rng.random())
    }
}

/// Scale-invariant SNR of estimate `s_hat` against reference `s`, in dB.
///
/// Both energies are floored at [`SI_SNR_EPS`] times the other, which caps
/// the result to ±80 dB without breaking scale invariance.
pub fn si_snr(s: &Waveform, s_hat: &Waveform) -> Result<f64, DspError> {
    si_snr_slices(&s.samples, &s_hat.samples)
}

pub(crate) fn si_snr_slices(s: &[f64], s_hat: &[f64]) -> Result<f64, DspError> {
    if s.len() != s_hat.len() {
        return Err(DspError::LengthMismatch(s.len(), s_hat.len()));
    }
    let ss = energy(s);
    if ss == 0.0 {
        return Err(DspError::ZeroEnergy("reference"));
    }
    let coef = dot(s, s_hat) / ss;
    let mut p = 0.0;
    let mut e = 0.0;
    for (&a, &b) in s.iter().zip(s_hat) {
        let proj = coef * a;
        let err = b - proj;
        p += proj * proj;
        e += err * err;
    }
    if p == 0.0 && e == 0.0 {
        // all-zero estimate
        return Ok(-10.0 * (1.0 / SI_SNR_EPS).log10());
    }
    let num = p.max(SI_SNR_EPS * e);
    let den = e.max(SI_SNR_EPS * p);
    Ok(10.0 * (num / den).log10())
}

/// Mean over both sources of `si_snr(s_c, ŝ_c) − si_snr(s_c, x)`.
///
/// `estimates` must already be aligned to `pair.sources`; see
/// [`align_estimates`].
pub fn si_snr_improvement(pair: &MixturePair, estimates: &[Waveform; 2]) -> Result<f64, DspError> {
    let mut total = 0.0;
    for (s, e) in pair.sources.iter().zip(estimates) {
        total += si_snr(s, e)? - si_snr(s, &pair.mixture)?;
    }
    Ok(total / 2.0)
}

/// Reorder `estimates` by the permutation with the highest mean Si-SNR
/// (ties keep the given order).
pub fn align_estimates(
    sources: &[Waveform; 2],
    estimates: [Waveform; 2],
) -> Result<[Waveform; 2], DspError> {
    let keep = si_snr(&sources[0], &estimates[0])? + si_snr(&sources[1], &estimates[1])?;
    let swap = si_snr(&sources[0], &estimates[1])? + si_snr(&sources[1], &estimates[0])?;
    let [a, b] = estimates;
    Ok(if swap > keep { [b, a] } else { [a, b] })
}
