//! JSON-lines corpus manifests and ingestion into segmented speakers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, Speaker, TaskError, SEGMENTS_PER_SPEAKER};
use crate::dsp::{self, read_audio, SEGMENT_SECONDS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub accent: String,
    pub speaker_id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub path: String,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    /// Rejects duplicate (accent, speaker) rows.
    pub fn validate(&self) -> Result<(), TaskError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert((&e.accent, &e.speaker_id)) {
                return Err(TaskError::Manifest(format!(
                    "duplicate speaker {}/{}",
                    e.accent, e.speaker_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn read(path: &Path) -> Result<Self, TaskError> {
        let f = File::open(path).map_err(|e| TaskError::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| TaskError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| TaskError::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(e);
        }
        let m = Self::new(entries, path.parent().unwrap_or(Path::new(".")));
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), TaskError> {
        let f = File::create(path).map_err(|e| TaskError::io(path, e))?;
        let mut w = BufWriter::new(f);
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("entry serializes");
            writeln!(w, "{line}").map_err(|e| TaskError::io(path, e))?;
        }
        w.flush().map_err(|e| TaskError::io(path, e))
    }
}

/// Per-row outcome of [`ingest`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub retained: Vec<RetainedSpeaker>,
    pub dropped: Vec<DroppedSpeaker>,
    /// Accents left with fewer than two eligible speakers.
    pub excluded_accents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedSpeaker {
    pub accent: String,
    pub speaker_id: String,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSpeaker {
    pub accent: String,
    pub speaker_id: String,
    pub reason: String,
}

/// Load, segment and filter every manifest row.
///
/// Unreadable files, wrong formats and speakers with fewer than three
/// segments are dropped and itemized in the report rather than failing the
/// whole run.
pub fn ingest(manifest: &CorpusManifest) -> Result<(Corpus, IngestReport), TaskError> {
    manifest.validate()?;
    let mut report = IngestReport::default();
    let mut accents: BTreeMap<String, Vec<Speaker>> = BTreeMap::new();
    for e in &manifest.entries {
        let drop = |reason: String| DroppedSpeaker {
            accent: e.accent.clone(),
            speaker_id: e.speaker_id.clone(),
            reason,
        };
        let wave = match read_audio(&manifest.resolve(e)) {
            Ok(w) => w,
            Err(err) => {
                report.dropped.push(drop(err.to_string()));
                continue;
            }
        };
        if wave.len() != e.samples {
            report.dropped.push(drop(format!(
                "manifest declares {} samples, file holds {}",
                e.samples,
                wave.len()
            )));
            continue;
        }
        let segments = match dsp::segment(&wave, SEGMENT_SECONDS) {
            Ok(s) => s,
            Err(err) => {
                report.dropped.push(drop(err.to_string()));
                continue;
            }
        };
        if segments.len() < SEGMENTS_PER_SPEAKER {
            report.dropped.push(drop(format!(
                "only {} segment(s), need {SEGMENTS_PER_SPEAKER}",
                segments.len()
            )));
            continue;
        }
        if let Some(i) = segments.iter().position(|s| s.energy() == 0.0) {
            report.dropped.push(drop(format!("segment {i} is silent")));
            continue;
        }
        report.retained.push(RetainedSpeaker {
            accent: e.accent.clone(),
            speaker_id: e.speaker_id.clone(),
            segments: segments.len(),
        });
        accents.entry(e.accent.clone()).or_default().push(Speaker {
            id: e.speaker_id.clone(),
            segments,
        });
    }
    accents.retain(|accent, speakers| {
        if speakers.len() < 2 {
            report.excluded_accents.push(accent.clone());
            false
        } else {
            speakers.sort_by(|a, b| a.id.cmp(&b.id));
            true
        }
    });
    Ok((Corpus { accents }, report))
}
