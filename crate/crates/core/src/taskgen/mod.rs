//! Accent-grouped meta tasks.
//!
//! Each task pairs two speakers of one accent, draws three segments from
//! each and mixes every combination into a 3×3 grid. One grid cell is the
//! support mixture; the four cells sharing neither its row nor its column
//! are the queries.

mod archive;
mod manifest;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::{self, DspError, MixturePair, Waveform};
use crate::par::{self, Execution};

pub use archive::{read_task_archive, write_task_archive, TaskArchive};
pub use manifest::{ingest, CorpusManifest, DroppedSpeaker, IngestReport, ManifestEntry, RetainedSpeaker};
pub use synth::{synth_corpus, synth_utterance, AccentFamily, SynthSpec};

pub const SEGMENTS_PER_SPEAKER: usize = 3;
pub const MIXTURES_PER_TASK: usize = SEGMENTS_PER_SPEAKER * SEGMENTS_PER_SPEAKER;
pub const QUERIES_PER_TASK: usize = 4;
pub const MAX_SPEAKERS_PER_ACCENT: usize = 12;
/// Mixing SNR range in dB.
pub const SNR_RANGE: (f64, f64) = (0.0, 5.0);

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("split: {0}")]
    Split(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error("batch of {requested} requested from {available} tasks")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("task construction: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] dsp::AudioError),
}

impl TaskError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TaskError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Independent stream seed for a labelled sub-computation.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub id: String,
    pub segments: Vec<Waveform>,
}

/// Segmented speakers grouped by accent (sorted by accent, then speaker id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub accents: BTreeMap<String, Vec<Speaker>>,
}

impl Corpus {
    pub fn accent_names(&self) -> Vec<String> {
        self.accents.keys().cloned().collect()
    }
}

/// Disjoint accent lists for training, development and testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn new(train: Vec<String>, dev: Vec<String>, test: Vec<String>) -> Result<Self, TaskError> {
        let s = Self { train, dev, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let mut seen = std::collections::BTreeSet::new();
        for a in self.train.iter().chain(&self.dev).chain(&self.test) {
            if !seen.insert(a) {
                return Err(TaskError::Split(format!("accent {a} assigned twice")));
            }
        }
        Ok(())
    }

    /// Seeded split with explicit counts; the remaining accents are unused.
    pub fn with_counts(
        accents: &[String],
        train: usize,
        dev: usize,
        test: usize,
        seed: u64,
    ) -> Result<Self, TaskError> {
        if train + dev + test > accents.len() {
            return Err(TaskError::Split(format!(
                "{} accents requested, {} available",
                train + dev + test,
                accents.len()
            )));
        }
        let mut sorted = accents.to_vec();
        sorted.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
        let order = sample(&mut rng, sorted.len(), train + dev + test).into_vec();
        let pick = |r: std::ops::Range<usize>| {
            let mut v: Vec<String> = order[r].iter().map(|&i| sorted[i].clone()).collect();
            v.sort();
            v
        };
        Self::new(pick(0..train), pick(train..train + dev), pick(train + dev..train + dev + test))
    }

    /// 85/19/19 for corpora of at least 123 accents, surplus going to
    /// training; smaller corpora keep the same proportions with at least
    /// one dev and one test accent.
    pub fn seeded(accents: &[String], seed: u64) -> Result<Self, TaskError> {
        let n = accents.len();
        if n < 3 {
            return Err(TaskError::Split(format!("need at least 3 accents, got {n}")));
        }
        let (dev, test) = if n >= 123 {
            (19, 19)
        } else {
            let k = ((n as f64) * 19.0 / 123.0).round().max(1.0) as usize;
            (k, k)
        };
        Self::with_counts(accents, n - dev - test, dev, test, seed)
    }
}

/// One speaker pair of one accent: 9 mixtures, 1 support, 4 queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub accent: String,
    pub speakers: [String; 2],
    /// Segment indices (into each speaker's segment list) used by the grid.
    pub segments: [[usize; SEGMENTS_PER_SPEAKER]; 2],
    /// Row-major grid: mixture `3·i + j` combines segment `i` of the first
    /// speaker with segment `j` of the second.
    pub mixtures: Vec<MixturePair>,
    pub support: usize,
    pub query: [usize; QUERIES_PER_TASK],
    /// Seed for noisy-condition evaluation of this task.
    pub noise_seed: u64,
}

/// Grid cells sharing neither row nor column with `support`.
pub fn query_cells(support: usize) -> [usize; QUERIES_PER_TASK] {
    let (r, c) = (support / SEGMENTS_PER_SPEAKER, support % SEGMENTS_PER_SPEAKER);
    let mut out = [0; QUERIES_PER_TASK];
    let mut k = 0;
    for i in 0..SEGMENTS_PER_SPEAKER {
        for j in 0..SEGMENTS_PER_SPEAKER {
            if i != r && j != c {
                out[k] = i * SEGMENTS_PER_SPEAKER + j;
                k += 1;
            }
        }
    }
    out
}

impl MetaTask {
    pub fn support_pair(&self) -> &MixturePair {
        &self.mixtures[self.support]
    }

    pub fn query_pairs(&self) -> impl Iterator<Item = &MixturePair> {
        self.query.iter().map(|&q| &self.mixtures[q])
    }

    /// Short identifier for logs and error messages.
    pub fn label(&self) -> String {
        format!("{}/{}+{}", self.accent, self.speakers[0], self.speakers[1])
    }

    /// Structural audit: grid size, support/query cardinality and segment
    /// disjointness between support and queries.
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::Invalid(format!("{}: {m}", self.label())));
        if self.mixtures.len() != MIXTURES_PER_TASK {
            return bad(format!("{} mixtures", self.mixtures.len()));
        }
        if self.support >= MIXTURES_PER_TASK {
            return bad("support index out of range".into());
        }
        let (r, c) = (self.support / 3, self.support % 3);
        for &q in &self.query {
            if q >= MIXTURES_PER_TASK || q / 3 == r || q % 3 == c {
                return bad(format!("query {q} shares a segment with support {}", self.support));
            }
        }
        let mut q = self.query.to_vec();
        q.sort();
        q.dedup();
        if q.len() != QUERIES_PER_TASK {
            return bad("duplicate query".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccentTaskSet {
    pub accent: String,
    pub tasks: Vec<MetaTask>,
}

impl AccentTaskSet {
    /// Task quantity tq.
    pub fn tq(&self) -> usize {
        self.tasks.len()
    }
}

/// Task sets for every split, each sorted by accent.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub split: SplitSpec,
    pub train: Vec<AccentTaskSet>,
    pub dev: Vec<AccentTaskSet>,
    pub test: Vec<AccentTaskSet>,
}

/// Build the task set of one accent.
pub fn build_accent_task_set(accent: &str, speakers: &[Speaker], seed: u64) -> Result<AccentTaskSet, TaskError> {
    if speakers.len() < 2 {
        return Err(TaskError::Invalid(format!("accent {accent} has fewer than 2 speakers")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, accent));
    let mut chosen: Vec<&Speaker> = if speakers.len() > MAX_SPEAKERS_PER_ACCENT {
        sample(&mut rng, speakers.len(), MAX_SPEAKERS_PER_ACCENT)
            .into_iter()
            .map(|i| &speakers[i])
            .collect()
    } else {
        speakers.iter().collect()
    };
    chosen.sort_by(|a, b| a.id.cmp(&b.id));
    let mut tasks = Vec::new();
    for a in 0..chosen.len() {
        for b in a + 1..chosen.len() {
            let spk = [chosen[a], chosen[b]];
            let mut segments = [[0; SEGMENTS_PER_SPEAKER]; 2];
            for (dst, s) in segments.iter_mut().zip(spk) {
                if s.segments.len() < SEGMENTS_PER_SPEAKER {
                    return Err(TaskError::Invalid(format!(
                        "speaker {accent}/{} has {} segments",
                        s.id,
                        s.segments.len()
                    )));
                }
                let idx = sample(&mut rng, s.segments.len(), SEGMENTS_PER_SPEAKER).into_vec();
                dst.copy_from_slice(&idx);
            }
            let snr: Vec<f64> = (0..MIXTURES_PER_TASK)
                .map(|_| rng.random_range(SNR_RANGE.0..=SNR_RANGE.1))
                .collect();
            let support = rng.random_range(0..MIXTURES_PER_TASK);
            let noise_seed = rng.random();
            let task = assemble_task(accent, spk.map(|s| s.id.clone()), segments, &snr, support, noise_seed, |k, i| {
                &spk[k].segments[i]
            })?;
            tasks.push(task);
        }
    }
    Ok(AccentTaskSet {
        accent: accent.to_string(),
        tasks,
    })
}

/// Rebuild a task's mixtures from its recorded choices.
pub(crate) fn assemble_task<'a>(
    accent: &str,
    speakers: [String; 2],
    segments: [[usize; SEGMENTS_PER_SPEAKER]; 2],
    snr_db: &[f64],
    support: usize,
    noise_seed: u64,
    segment: impl Fn(usize, usize) -> &'a Waveform,
) -> Result<MetaTask, TaskError> {
    if snr_db.len() != MIXTURES_PER_TASK {
        return Err(TaskError::Invalid(format!("{} SNR values", snr_db.len())));
    }
    let mut mixtures = Vec::with_capacity(MIXTURES_PER_TASK);
    for i in 0..SEGMENTS_PER_SPEAKER {
        for j in 0..SEGMENTS_PER_SPEAKER {
            let m = i * SEGMENTS_PER_SPEAKER + j;
            mixtures.push(dsp::mix_at_snr(segment(0, segments[0][i]), segment(1, segments[1][j]), snr_db[m])?);
        }
    }
    let task = MetaTask {
        accent: accent.to_string(),
        speakers,
        segments,
        mixtures,
        support,
        query: query_cells(support),
        noise_seed,
    };
    task.validate()?;
    Ok(task)
}

/// Build task sets for every accent of `split`, accents in parallel.
pub fn build_accent_task_sets(
    corpus: &Corpus,
    split: &SplitSpec,
    seed: u64,
    exec: Execution,
) -> Result<TaskSplits, TaskError> {
    split.validate()?;
    let build = |names: &[String]| -> Result<Vec<AccentTaskSet>, TaskError> {
        let mut names = names.to_vec();
        names.sort();
        for n in &names {
            if !corpus.accents.contains_key(n) {
                return Err(TaskError::Split(format!("accent {n} not in corpus")));
            }
        }
        par::map(exec, &names, |n| build_accent_task_set(n, &corpus.accents[n], seed))
            .into_iter()
            .collect()
    };
    Ok(TaskSplits {
        split: split.clone(),
        train: build(&split.train)?,
        dev: build(&split.dev)?,
        test: build(&split.test)?,
    })
}

/// Position of a task inside a list of task sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskIndex {
    pub set: usize,
    pub task: usize,
}

/// Total number of tasks across sets.
pub fn total_tasks(sets: &[AccentTaskSet]) -> usize {
    sets.iter().map(AccentTaskSet::tq).sum()
}

/// Draw `b` distinct tasks uniformly from the pooled tasks, so each draw
/// comes from set `k` with probability `tq_k / Σ tq`.
pub fn sample_task_batch<R: Rng>(sets: &[AccentTaskSet], b: usize, rng: &mut R) -> Result<Vec<TaskIndex>, TaskError> {
    let total = total_tasks(sets);
    if b == 0 || b > total {
        return Err(TaskError::BatchTooLarge {
            requested: b,
            available: total,
        });
    }
    let flat: Vec<TaskIndex> = sets
        .iter()
        .enumerate()
        .flat_map(|(s, set)| (0..set.tq()).map(move |t| TaskIndex { set: s, task: t }))
        .collect();
    Ok(sample(rng, total, b).into_iter().map(|i| flat[i]).collect())
}

/// Resolve indices from [`sample_task_batch`].
pub fn resolve<'a>(sets: &'a [AccentTaskSet], batch: &[TaskIndex]) -> Vec<&'a MetaTask> {
    batch.iter().map(|i| &sets[i.set].tasks[i.task]).collect()
}
