//! On-disk task archive: `index.json` plus one raw file per used segment.
//!
//! The index records every random choice (segments, SNRs, support cell,
//! noise seed), so mixtures are rebuilt bit-exactly on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    assemble_task, AccentTaskSet, Corpus, MetaTask, SplitSpec, TaskError, TaskSplits, QUERIES_PER_TASK,
    SEGMENTS_PER_SPEAKER,
};
use crate::dsp::{read_raw, write_raw};
use crate::dsp::Waveform;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskRecord {
    speakers: [String; 2],
    segments: [[usize; SEGMENTS_PER_SPEAKER]; 2],
    /// Raw file for each grid segment, relative to the archive directory.
    segment_files: [[String; SEGMENTS_PER_SPEAKER]; 2],
    snr_db: Vec<f64>,
    support: usize,
    query: [usize; QUERIES_PER_TASK],
    noise_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SetRecord {
    accent: String,
    tasks: Vec<TaskRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    seed: u64,
    split: SplitSpec,
    train: Vec<SetRecord>,
    dev: Vec<SetRecord>,
    test: Vec<SetRecord>,
}

/// Task splits loaded from an archive along with the seed that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskArchive {
    pub seed: u64,
    pub splits: TaskSplits,
}

/// Write `splits` under `dir`. `corpus` supplies the segment audio.
pub fn write_task_archive(dir: &Path, splits: &TaskSplits, corpus: &Corpus, seed: u64) -> Result<(), TaskError> {
    let seg_dir = dir.join("segments");
    std::fs::create_dir_all(&seg_dir).map_err(|e| TaskError::io(&seg_dir, e))?;
    let mut files: BTreeMap<(String, String, usize), String> = BTreeMap::new();
    let mut record_sets = |sets: &[AccentTaskSet]| -> Result<Vec<SetRecord>, TaskError> {
        let mut out = Vec::with_capacity(sets.len());
        for set in sets {
            let speakers = &corpus.accents[&set.accent];
            let mut tasks = Vec::with_capacity(set.tasks.len());
            for t in &set.tasks {
                let mut segment_files: [[String; SEGMENTS_PER_SPEAKER]; 2] = Default::default();
                for k in 0..2 {
                    let spk = speakers
                        .iter()
                        .find(|s| s.id == t.speakers[k])
                        .ok_or_else(|| TaskError::Archive(format!("speaker {} missing from corpus", t.speakers[k])))?;
                    for (i, &seg) in t.segments[k].iter().enumerate() {
                        let key = (set.accent.clone(), spk.id.clone(), seg);
                        let next = files.len();
                        let rel = match files.get(&key) {
                            Some(r) => r.clone(),
                            None => {
                                let rel = format!("segments/seg{next:06}.raw");
                                write_raw(&dir.join(&rel), &spk.segments[seg])?;
                                files.insert(key, rel.clone());
                                rel
                            }
                        };
                        segment_files[k][i] = rel;
                    }
                }
                tasks.push(TaskRecord {
                    speakers: t.speakers.clone(),
                    segments: t.segments,
                    segment_files,
                    snr_db: t.mixtures.iter().map(|m| m.snr_db).collect(),
                    support: t.support,
                    query: t.query,
                    noise_seed: t.noise_seed,
                });
            }
            out.push(SetRecord {
                accent: set.accent.clone(),
                tasks,
            });
        }
        Ok(out)
    };
    let train = record_sets(&splits.train)?;
    let dev = record_sets(&splits.dev)?;
    let test = record_sets(&splits.test)?;
    let index = Index {
        format_version: FORMAT_VERSION,
        seed,
        split: splits.split.clone(),
        train,
        dev,
        test,
    };
    let path = dir.join("index.json");
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    std::fs::write(&path, json).map_err(|e| TaskError::io(&path, e))
}

pub fn read_task_archive(dir: &Path) -> Result<TaskArchive, TaskError> {
    let path = dir.join("index.json");
    let bytes = std::fs::read(&path).map_err(|e| TaskError::io(&path, e))?;
    let index: Index = serde_json::from_slice(&bytes).map_err(|e| TaskError::Archive(e.to_string()))?;
    if index.format_version != FORMAT_VERSION {
        return Err(TaskError::Archive(format!("unsupported format version {}", index.format_version)));
    }
    index.split.validate()?;
    let mut cache: BTreeMap<String, Waveform> = BTreeMap::new();
    let mut load_sets = |records: &[SetRecord]| -> Result<Vec<AccentTaskSet>, TaskError> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let mut tasks: Vec<MetaTask> = Vec::with_capacity(r.tasks.len());
            for t in &r.tasks {
                for f in t.segment_files.iter().flatten() {
                    if !cache.contains_key(f) {
                        cache.insert(f.clone(), read_raw(&dir.join(f))?);
                    }
                }
                let task = assemble_task(
                    &r.accent,
                    t.speakers.clone(),
                    t.segments,
                    &t.snr_db,
                    t.support,
                    t.noise_seed,
                    |k, i| {
                        let pos = t.segments[k].iter().position(|&s| s == i).expect("segment recorded");
                        &cache[&t.segment_files[k][pos]]
                    },
                )?;
                if task.query != t.query {
                    return Err(TaskError::Archive(format!("{}: query cells disagree with support", task.label())));
                }
                tasks.push(task);
            }
            out.push(AccentTaskSet {
                accent: r.accent.clone(),
                tasks,
            });
        }
        Ok(out)
    };
    let train = load_sets(&index.train)?;
    let dev = load_sets(&index.dev)?;
    let test = load_sets(&index.test)?;
    Ok(TaskArchive {
        seed: index.seed,
        splits: TaskSplits {
            split: index.split,
            train,
            dev,
            test,
        },
    })
}
