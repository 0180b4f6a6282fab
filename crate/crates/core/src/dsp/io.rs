//! Audio file formats: 16-bit PCM mono WAV and a lossless raw format
//! (little-endian `u64` sample count followed by little-endian `f64` samples).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Waveform, SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: expected mono 16-bit PCM at {SAMPLE_RATE} Hz, got {channels} ch / {bits} bit / {rate} Hz")]
    Format {
        path: String,
        channels: u16,
        bits: u16,
        rate: u32,
    },
    #[error("{path}: raw header declares {declared} samples but file holds {actual}")]
    Truncated {
        path: String,
        declared: u64,
        actual: u64,
    },
    #[error("{path}: unknown audio extension (expected .wav or .raw)")]
    UnknownExtension { path: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AudioError + '_ {
    move |source| AudioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Read a mono 16-bit 8 kHz WAV file, normalizing samples to [−1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    let wav_err = |source| AudioError::Wav {
        path: path.display().to_string(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
        || spec.sample_rate != SAMPLE_RATE
    {
        return Err(AudioError::Format {
            path: path.display().to_string(),
            channels: spec.channels,
            bits: spec.bits_per_sample,
            rate: spec.sample_rate,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok(Waveform::new(samples))
}

/// Write a mono 16-bit WAV file; samples are clipped to the 16-bit range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), AudioError> {
    let wav_err = |source| AudioError::Wav {
        path: path.display().to_string(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Read the raw lossless format. The rate is not stored and is taken as 8 kHz.
pub fn read_raw(path: &Path) -> Result<Waveform, AudioError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let mut header = [0u8; 8];
    r.read_exact(&mut header).map_err(io_err(path))?;
    let declared = u64::from_le_bytes(header);
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(io_err(path))?;
    if body.len() as u64 != declared * 8 {
        return Err(AudioError::Truncated {
            path: path.display().to_string(),
            declared,
            actual: body.len() as u64 / 8,
        });
    }
    let samples = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Waveform::new(samples))
}

pub fn write_raw(path: &Path, wave: &Waveform) -> Result<(), AudioError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(&(wave.samples.len() as u64).to_le_bytes())
        .map_err(io_err(path))?;
    for s in &wave.samples {
        w.write_all(&s.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Dispatch on extension: `.wav` or `.raw`.
pub fn read_audio(path: &Path) -> Result<Waveform, AudioError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => read_wav(path),
        Some("raw") => read_raw(path),
        _ => Err(AudioError::UnknownExtension {
            path: path.display().to_string(),
        }),
    }
}
