//! Desk-scale comparison of a FOMAML-trained separator against the joint
//! baseline on one seeded synthetic corpus.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{beta_sweep, meta_test, Condition, EvalConfig, EvalError, Phase, DEFAULT_BETA_GRID, META_BETA};
use crate::autodiff::ParamVector;
use crate::model::{Checkpoint, SeparatorConfig};
use crate::par::Execution;
use crate::taskgen::{build_accent_task_sets, ingest, synth_corpus, SplitSpec, SynthSpec, TaskSplits};
use crate::trainer::{checkpoint_meta, train, Mode, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrendSpec {
    pub train_accents: usize,
    pub test_accents: usize,
    pub speakers_per_accent: usize,
    pub seconds: f64,
    pub joint_epochs: usize,
    pub meta_epochs: usize,
    pub separator: SeparatorConfig,
    /// Fine-tune rate for the FOMAML model.
    pub meta_beta: f64,
    /// Fine-tune rates swept for the joint model.
    pub grid: Vec<f64>,
    /// Also score both models on the test tasks every this many epochs.
    pub eval_every: Option<usize>,
    pub train: TrainConfig,
    /// Minibatch size of an extra joint model trained with the usual joint
    /// settings (more updates per epoch than the matched baseline).
    pub reference_joint_batch: Option<usize>,
}

impl Default for TrendSpec {
    fn default() -> Self {
        Self {
            train_accents: 12,
            test_accents: 4,
            speakers_per_accent: 3,
            seconds: 12.5,
            joint_epochs: 20,
            meta_epochs: 20,
            separator: SeparatorConfig::tiny(),
            meta_beta: META_BETA,
            grid: DEFAULT_BETA_GRID.to_vec(),
            eval_every: None,
            // one joint update sees as many mixtures as one meta batch of 4 tasks
            train: TrainConfig {
                joint_batch: 20,
                ..TrainConfig::default()
            },
            reference_joint_batch: Some(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mode: Mode,
    pub before_db: f64,
    /// After fine-tuning: at `meta_beta` for FOMAML, at the best grid β for joint.
    pub after_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRun {
    pub seed: u64,
    pub fomaml_before_db: f64,
    pub fomaml_after_db: f64,
    pub joint_before_db: f64,
    pub joint_best_beta: f64,
    pub joint_after_db: f64,
    /// Joint sweep (β, clean mean after fine-tuning).
    pub joint_sweep: Vec<(f64, f64)>,
    pub fomaml_seconds: f64,
    pub joint_seconds: f64,
    pub curve: Vec<CurvePoint>,
    pub reference_joint: Option<ReferenceJoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceJoint {
    pub batch: usize,
    pub before_db: f64,
    pub best_beta: f64,
    pub after_db: f64,
    pub sweep: Vec<(f64, f64)>,
    pub seconds: f64,
}

fn sweep_at(sweep: &[(f64, f64)], beta: f64) -> Option<f64> {
    sweep.iter().find(|(b, _)| *b == beta).map(|(_, m)| *m)
}

impl TrendRun {
    pub fn joint_at(&self, beta: f64) -> Option<f64> {
        sweep_at(&self.joint_sweep, beta)
    }
}

impl ReferenceJoint {
    pub fn at(&self, beta: f64) -> Option<f64> {
        sweep_at(&self.sweep, beta)
    }
}

fn clean(exec: Execution, grid: Vec<f64>) -> EvalConfig {
    EvalConfig {
        conditions: vec![Condition::Clean],
        grid,
        execution: exec,
        ..EvalConfig::default()
    }
}

fn joint_scores(ckpt: &Checkpoint, splits: &TaskSplits, spec: &TrendSpec, exec: Execution) -> Result<(f64, f64, f64, Vec<(f64, f64)>), EvalError> {
    let sweep = beta_sweep(ckpt, &splits.test, &clean(exec, spec.grid.clone()), true)?;
    let best = sweep.best(Condition::Clean).expect("clean evaluated").clone();
    let before = sweep.reports[0]
        .summary(Condition::Clean, Phase::Before)
        .expect("clean evaluated")
        .overall_mean_db;
    let curve = sweep.points.iter().map(|p| (p.beta, p.mean_si_snri_db)).collect();
    Ok((before, best.beta, best.mean_si_snri_db, curve))
}

fn meta_scores(ckpt: &Checkpoint, splits: &TaskSplits, spec: &TrendSpec, exec: Execution) -> Result<(f64, f64), EvalError> {
    let r = meta_test(ckpt, &splits.test, spec.meta_beta, &clean(exec, vec![]))?;
    let get = |p| r.summary(Condition::Clean, p).expect("clean evaluated").overall_mean_db;
    Ok((get(Phase::Before), get(Phase::After)))
}

/// Build the corpus under `work_dir`, train both models and score them on
/// the clean test tasks.
pub fn run_trend(spec: &TrendSpec, seed: u64, work_dir: &Path, exec: Execution) -> Result<TrendRun, EvalError> {
    let synth = SynthSpec {
        accents: spec.train_accents + spec.test_accents,
        speakers_per_accent: spec.speakers_per_accent,
        seconds: spec.seconds,
        seed,
    };
    let task_err = |e: crate::taskgen::TaskError| EvalError::Train(TrainError::Task(e));
    let manifest = synth_corpus(&synth, work_dir).map_err(task_err)?;
    let (corpus, _) = ingest(&manifest).map_err(task_err)?;
    let split = SplitSpec::with_counts(&corpus.accent_names(), spec.train_accents, 0, spec.test_accents, seed)
        .map_err(task_err)?;
    let splits = build_accent_task_sets(&corpus, &split, seed, exec).map_err(task_err)?;

    let mut curve = Vec::new();
    let mut run = |mode: Mode, epochs: usize, joint_batch: usize, record: bool| -> Result<(Checkpoint, f64), EvalError> {
        let cfg = TrainConfig {
            mode,
            epochs,
            seed,
            joint_batch,
            separator: spec.separator.clone(),
            execution: exec,
            ..spec.train.clone()
        };
        let eval_every = spec.eval_every.filter(|_| record);
        let accents: Vec<String> = splits.train.iter().map(|s| s.accent.clone()).collect();
        let meta = checkpoint_meta(&cfg, &accents);
        let mut mid: Vec<(usize, ParamVector)> = Vec::new();
        let start = Instant::now();
        let out = train(&cfg, &splits.train, &[], &mut |line, theta| {
            if let Some(k) = eval_every {
                if line.epoch % k == 0 && line.epoch < epochs {
                    mid.push((line.epoch, theta.clone()));
                }
            }
        })?;
        let seconds = start.elapsed().as_secs_f64();
        if let Some(reason) = out.aborted {
            return Err(EvalError::Train(TrainError::Config(format!("{} training diverged: {reason}", mode.as_str()))));
        }
        for (epoch, params) in mid.into_iter().chain(std::iter::once((epochs, out.checkpoint.params.clone()))) {
            if eval_every.is_none() {
                break;
            }
            let ck = Checkpoint::new(spec.separator.clone(), meta.clone(), params);
            let (before_db, after_db) = if mode == Mode::Joint {
                let (b, _, a, _) = joint_scores(&ck, &splits, spec, exec)?;
                (b, a)
            } else {
                meta_scores(&ck, &splits, spec, exec)?
            };
            curve.push(CurvePoint {
                epoch,
                mode,
                before_db,
                after_db,
            });
        }
        Ok((out.checkpoint, seconds))
    };
    let jb = spec.train.joint_batch;
    let (fo, fomaml_seconds) = run(Mode::Fomaml, spec.meta_epochs, jb, true)?;
    let (joint, joint_seconds) = run(Mode::Joint, spec.joint_epochs, jb, true)?;
    let reference = match spec.reference_joint_batch {
        Some(batch) => Some((batch, run(Mode::Joint, spec.joint_epochs, batch, false)?)),
        None => None,
    };
    let (fomaml_before_db, fomaml_after_db) = meta_scores(&fo, &splits, spec, exec)?;
    let (joint_before_db, joint_best_beta, joint_after_db, joint_sweep) = joint_scores(&joint, &splits, spec, exec)?;
    let reference_joint = match reference {
        Some((batch, (ck, seconds))) => {
            let (before_db, best_beta, after_db, sweep) = joint_scores(&ck, &splits, spec, exec)?;
            Some(ReferenceJoint {
                batch,
                before_db,
                best_beta,
                after_db,
                sweep,
                seconds,
            })
        }
        None => None,
    };
    Ok(TrendRun {
        seed,
        fomaml_before_db,
        fomaml_after_db,
        joint_before_db,
        joint_best_beta,
        joint_after_db,
        joint_sweep,
        fomaml_seconds,
        joint_seconds,
        curve,
        reference_joint,
    })
}
