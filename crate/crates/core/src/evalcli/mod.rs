//! Meta-testing, β sweeps, report aggregation and the command-line surface.

pub mod cli;
pub mod trend;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamVector;
use crate::dsp::NoisePolicy;
use crate::model::{Checkpoint, SeparatorConfig};
use crate::par::{self, Execution};
use crate::taskgen::{AccentTaskSet, MetaTask};
use crate::trainer::{
    checkpoint_mode, checkpoint_train_accents, evaluate_pair, gradient_step, support_gradient, SeparationObjective,
    TrainError,
};

/// The fine-tune grid swept by default.
pub const DEFAULT_BETA_GRID: [f64; 9] = [1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1];

/// Fine-tune rate used for meta-trained checkpoints.
pub const META_BETA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("test accents {0:?} were used for training")]
    AccentOverlap(Vec<String>),
    #[error("empty β grid")]
    EmptyGrid,
    #[error("no test tasks")]
    NoTasks,
    #[error("refusing to sweep β for a {0} checkpoint; pass --force to override")]
    SweepRefused(String),
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Noisy,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    After,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Before => "before",
            Phase::After => "after",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccentScore {
    pub accent: String,
    pub mean_si_snri_db: f64,
    pub n_tasks: usize,
}

/// One condition × phase cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub condition: Condition,
    pub phase: Phase,
    pub accents: Vec<AccentScore>,
    /// Mean over every test task.
    pub overall_mean_db: f64,
    /// Population standard deviation of the per-accent means.
    pub accent_std_db: f64,
    pub n_tasks: usize,
}

impl PhaseSummary {
    /// Aggregate per-task scores given as (accent, score) in sorted order.
    pub fn from_tasks(condition: Condition, phase: Phase, scores: &[(String, f64)]) -> Self {
        let mut accents: Vec<AccentScore> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        for (accent, s) in scores {
            match accents.last_mut() {
                Some(a) if &a.accent == accent => {
                    a.n_tasks += 1;
                    *sums.last_mut().unwrap() += s;
                }
                _ => {
                    accents.push(AccentScore {
                        accent: accent.clone(),
                        mean_si_snri_db: 0.0,
                        n_tasks: 1,
                    });
                    sums.push(*s);
                }
            }
        }
        for (a, s) in accents.iter_mut().zip(&sums) {
            a.mean_si_snri_db = s / a.n_tasks as f64;
        }
        let n_tasks = scores.len();
        let overall_mean_db = if n_tasks == 0 {
            0.0
        } else {
            scores.iter().map(|(_, s)| s).sum::<f64>() / n_tasks as f64
        };
        let accent_std_db = if accents.is_empty() {
            0.0
        } else {
            let k = accents.len() as f64;
            let mu = accents.iter().map(|a| a.mean_si_snri_db).sum::<f64>() / k;
            (accents.iter().map(|a| (a.mean_si_snri_db - mu).powi(2)).sum::<f64>() / k).sqrt()
        };
        Self {
            condition,
            phase,
            accents,
            overall_mean_db,
            accent_std_db,
            n_tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub accent: String,
    pub task: String,
    pub condition: Condition,
    pub before_db: f64,
    pub after_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub beta: f64,
    /// Policy used for the noisy condition; each task's noise is seeded by
    /// its `noise_seed` and the mixture index.
    pub noise_policy: NoisePolicy,
    pub summaries: Vec<PhaseSummary>,
    pub tasks: Vec<TaskScore>,
}

impl EvalReport {
    pub fn summary(&self, condition: Condition, phase: Phase) -> Option<&PhaseSummary> {
        self.summaries
            .iter()
            .find(|s| s.condition == condition && s.phase == phase)
    }
}

/// Evaluation settings shared by [`meta_test`] and [`beta_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Fine-tune rate; `None` picks 0.01 for meta checkpoints and 5e-4 for joint.
    pub beta: Option<f64>,
    pub conditions: Vec<Condition>,
    pub noise_policy: NoisePolicy,
    pub grid: Vec<f64>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta: None,
            conditions: vec![Condition::Clean, Condition::Noisy],
            noise_policy: NoisePolicy::default(),
            grid: DEFAULT_BETA_GRID.to_vec(),
            execution: Execution::default(),
        }
    }
}

/// Fine-tune rate for a checkpoint when none is given.
pub fn default_beta(ckpt: &Checkpoint) -> f64 {
    match checkpoint_mode(&ckpt.meta) {
        Some(m) if m.is_meta() => META_BETA,
        _ => 5e-4,
    }
}

fn check_disjoint(ckpt: &Checkpoint, test: &[AccentTaskSet]) -> Result<(), EvalError> {
    let trained: BTreeSet<String> = checkpoint_train_accents(&ckpt.meta).into_iter().collect();
    let overlap: Vec<String> = test
        .iter()
        .filter(|s| trained.contains(&s.accent))
        .map(|s| s.accent.clone())
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(EvalError::AccentOverlap(overlap))
    }
}

fn sorted_tasks(test: &[AccentTaskSet]) -> Vec<&MetaTask> {
    let mut sets: Vec<&AccentTaskSet> = test.iter().collect();
    sets.sort_by(|a, b| a.accent.cmp(&b.accent));
    sets.iter().flat_map(|s| &s.tasks).collect()
}

/// Mean query Si-SNRi of a task at θ and at θ − β_k·g for every β in `betas`.
fn task_curve(
    theta: &ParamVector,
    cfg: &SeparatorConfig,
    task: &MetaTask,
    betas: &[f64],
    noise: Option<NoisePolicy>,
) -> Result<(f64, Vec<f64>), TrainError> {
    let obj = SeparationObjective { config: cfg, noise };
    let queries = task
        .query
        .iter()
        .map(|&q| obj.mixture(task, q))
        .collect::<Result<Vec<_>, _>>()?;
    let score = |p: &ParamVector| -> Result<f64, TrainError> {
        let mut total = 0.0;
        for q in &queries {
            total += evaluate_pair(p, cfg, q)?;
        }
        Ok(total / queries.len() as f64)
    };
    let before = score(theta)?;
    let grad = if betas.iter().any(|&b| b != 0.0) {
        Some(support_gradient(theta, cfg, task, noise)?)
    } else {
        None
    };
    let mut after = Vec::with_capacity(betas.len());
    for &b in betas {
        after.push(match &grad {
            Some(g) if b != 0.0 => {
                let adapted = gradient_step(theta, g, b);
                if !adapted.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: "adapted parameters",
                        context: task.label(),
                    });
                }
                score(&adapted)?
            }
            _ => before,
        });
    }
    Ok((before, after))
}

/// Per-condition (before, after-per-β) scores for every task in sorted order.
fn evaluate_curves(
    ckpt: &Checkpoint,
    test: &[AccentTaskSet],
    betas: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<(Condition, Vec<(String, String, f64, Vec<f64>)>)>, EvalError> {
    check_disjoint(ckpt, test)?;
    let tasks = sorted_tasks(test);
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let mut out = Vec::new();
    for &condition in &cfg.conditions {
        let noise = (condition == Condition::Noisy).then_some(cfg.noise_policy);
        let results = par::map(cfg.execution, &tasks, |t| {
            task_curve(&ckpt.params, &ckpt.separator, t, betas, noise)
        });
        let mut rows = Vec::with_capacity(tasks.len());
        for (t, r) in tasks.iter().zip(results) {
            let (before, after) = r?;
            rows.push((t.accent.clone(), t.label(), before, after));
        }
        out.push((condition, rows));
    }
    Ok(out)
}

/// Evaluate every test task before and after one fine-tune step at `beta`.
pub fn meta_test(ckpt: &Checkpoint, test: &[AccentTaskSet], beta: f64, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let curves = evaluate_curves(ckpt, test, &[beta], cfg)?;
    Ok(build_report(ckpt, beta, cfg, &curves, 0))
}

fn build_report(
    ckpt: &Checkpoint,
    beta: f64,
    cfg: &EvalConfig,
    curves: &[(Condition, Vec<(String, String, f64, Vec<f64>)>)],
    k: usize,
) -> EvalReport {
    let mut summaries = Vec::new();
    let mut tasks = Vec::new();
    for (condition, rows) in curves {
        let before: Vec<(String, f64)> = rows.iter().map(|r| (r.0.clone(), r.2)).collect();
        let after: Vec<(String, f64)> = rows.iter().map(|r| (r.0.clone(), r.3[k])).collect();
        summaries.push(PhaseSummary::from_tasks(*condition, Phase::Before, &before));
        summaries.push(PhaseSummary::from_tasks(*condition, Phase::After, &after));
        tasks.extend(rows.iter().map(|r| TaskScore {
            accent: r.0.clone(),
            task: r.1.clone(),
            condition: *condition,
            before_db: r.2,
            after_db: r.3[k],
        }));
    }
    EvalReport {
        config_hash: ckpt.config_hash(),
        beta,
        noise_policy: cfg.noise_policy,
        summaries,
        tasks,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub condition: Condition,
    pub mean_si_snri_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Highest-scoring β per condition (first on ties).
    pub best: Vec<SweepPoint>,
    pub reports: Vec<EvalReport>,
}

impl SweepResult {
    pub fn mean(&self, condition: Condition, beta: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.condition == condition && p.beta == beta)
            .map(|p| p.mean_si_snri_db)
    }

    pub fn best(&self, condition: Condition) -> Option<&SweepPoint> {
        self.best.iter().find(|p| p.condition == condition)
    }
}

/// Run [`meta_test`] at every β of `cfg.grid`, sharing one support gradient
/// per task across the grid.
pub fn beta_sweep(ckpt: &Checkpoint, test: &[AccentTaskSet], cfg: &EvalConfig, force: bool) -> Result<SweepResult, EvalError> {
    if cfg.grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if let Some(m) = checkpoint_mode(&ckpt.meta) {
        if m.is_meta() && !force {
            return Err(EvalError::SweepRefused(m.as_str().into()));
        }
    }
    let curves = evaluate_curves(ckpt, test, &cfg.grid, cfg)?;
    let reports: Vec<EvalReport> = (0..cfg.grid.len())
        .map(|k| build_report(ckpt, cfg.grid[k], cfg, &curves, k))
        .collect();
    let mut points = Vec::new();
    let mut best: Vec<SweepPoint> = Vec::new();
    for &condition in &cfg.conditions {
        let mut top: Option<SweepPoint> = None;
        for r in &reports {
            let s = r.summary(condition, Phase::After).expect("condition evaluated");
            let p = SweepPoint {
                beta: r.beta,
                condition,
                mean_si_snri_db: s.overall_mean_db,
            };
            if top.as_ref().is_none_or(|t| p.mean_si_snri_db > t.mean_si_snri_db) {
                top = Some(p.clone());
            }
            points.push(p);
        }
        best.extend(top);
    }
    Ok(SweepResult { points, best, reports })
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub accent: String,
    pub condition: Condition,
    pub phase: Phase,
    pub mean_si_snri_db: f64,
    pub n_tasks: usize,
}

/// Accent label of the summary row that closes each condition × phase block.
pub const OVERALL_ROW: &str = "ALL";

pub fn report_rows(report: &EvalReport) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for s in &report.summaries {
        for a in &s.accents {
            rows.push(ReportRow {
                accent: a.accent.clone(),
                condition: s.condition,
                phase: s.phase,
                mean_si_snri_db: a.mean_si_snri_db,
                n_tasks: a.n_tasks,
            });
        }
        if !s.accents.is_empty() {
            rows.push(ReportRow {
                accent: OVERALL_ROW.into(),
                condition: s.condition,
                phase: s.phase,
                mean_si_snri_db: s.overall_mean_db,
                n_tasks: s.n_tasks,
            });
        }
    }
    rows
}

fn write_err(path: &Path, e: impl fmt::Display) -> EvalError {
    EvalError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_rows_csv(path: &Path, rows: &[ReportRow]) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| write_err(path, e))?;
    w.write_record(["accent", "condition", "phase", "mean_si_snri_db", "n_tasks"])
        .map_err(|e| write_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>, EvalError> {
    let read_err = |e: &dyn fmt::Display| EvalError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| read_err(&e))?;
    r.deserialize().map(|row| row.map_err(|e| read_err(&e))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| write_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| write_err(path, e))
}

/// Write `{stem}.csv` and its `{stem}.json` mirror under `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_rows_csv(&csv_path, &report_rows(report))?;
    write_json(&json_path, report)?;
    Ok((csv_path, json_path))
}

/// Write the sweep curve as CSV (beta, condition, mean_si_snri_db) plus a JSON mirror.
pub fn emit_sweep(sweep: &SweepResult, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| write_err(&csv_path, e))?;
    for p in &sweep.points {
        w.serialize(p).map_err(|e| write_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| write_err(&csv_path, e))?;
    write_json(&json_path, sweep)?;
    Ok((csv_path, json_path))
}
