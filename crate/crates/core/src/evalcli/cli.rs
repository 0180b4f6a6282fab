//! `metasep` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use super::{beta_sweep, default_beta, emit_report, emit_sweep, meta_test, write_json, Condition, EvalConfig, EvalError};
use crate::model::{Checkpoint, SeparatorConfig};
use crate::taskgen::{
    build_accent_task_sets, ingest, read_task_archive, synth_corpus, write_task_archive, AccentTaskSet, CorpusManifest,
    SplitSpec, SynthSpec, TaskSplits,
};
use crate::trainer::{finetune_adapt, train, Mode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "metasep", version, about = "Meta-learned two-speaker separation")]
pub struct Cli {
    /// Seed applied to every seeded stage (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic accented corpus and its manifest.
    SynthCorpus(SynthArgs),
    /// Ingest a manifest, split accents and write a task archive.
    BuildTasks(BuildArgs),
    /// Train a joint, MAML or FOMAML checkpoint.
    Train(TrainArgs),
    /// Adapt a checkpoint to one test task.
    Finetune(FinetuneArgs),
    /// Meta-test a checkpoint on the archive's test accents.
    Evaluate(EvalArgs),
    /// Evaluate over a grid of fine-tune rates.
    SweepBeta(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub accents: Option<usize>,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub dev: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Task archive directory.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub outer_lr: Option<f64>,
    /// Train on noisy mixtures.
    #[arg(long)]
    pub noise: bool,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task archive directory.
    #[arg(long)]
    pub tasks: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Test accent; defaults to the first.
    #[arg(long)]
    pub accent: Option<String>,
    /// Task index within the accent.
    #[arg(long, default_value_t = 0)]
    pub task: usize,
    #[arg(long)]
    pub noisy: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<Condition>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<Condition>>,
    /// Allow sweeping meta-trained checkpoints.
    #[arg(long)]
    pub force: bool,
}

impl clap::ValueEnum for Condition {
    fn value_variants<'a>() -> &'a [Self] {
        &[Condition::Clean, Condition::Noisy]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        }))
    }
}

/// Accent counts for `build-tasks`; unset counts use the default split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub train: Option<usize>,
    pub dev: Option<usize>,
    pub test: Option<usize>,
}

/// Everything a run reads from `--config`, after flag overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub split: SplitCounts,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSpec::default(),
            split: SplitCounts::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": { "kind": self.kind, "message": self.message } })
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::AccentOverlap(_) => "accent_overlap",
            EvalError::SweepRefused(_) => "sweep_refused",
            EvalError::Train(_) => "evaluation",
            _ => "io",
        };
        CliError::new(kind, e)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write_resolved(out: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::new("io", format!("{}: {e}", out.display())))?;
    let v = serde_json::json!({ "command": command, "config": cfg });
    write_json(&out.join("resolved_config.json"), &v).map_err(CliError::from)
}

fn load_archive(dir: &Path) -> Result<TaskSplits, CliError> {
    Ok(read_task_archive(dir).map_err(|e| CliError::new("tasks", e))?.splits)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::new("checkpoint", e))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

/// Parse `args` and run the selected subcommand; returns a JSON summary.
pub fn run<I, T>(args: I) -> Result<serde_json::Value, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::new("help", e.to_string())
        }
        _ => CliError::new("usage", e.to_string()),
    })?;
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match &cli.command {
        Command::SynthCorpus(a) => {
            if let Some(n) = a.accents {
                cfg.synth.accents = n;
            }
            if let Some(n) = a.speakers {
                cfg.synth.speakers_per_accent = n;
            }
            if let Some(s) = a.seconds {
                cfg.synth.seconds = s;
            }
            write_resolved(&out, "synth-corpus", &cfg)?;
            let m = synth_corpus(&cfg.synth, &out).map_err(|e| CliError::new("synth", e))?;
            Ok(serde_json::json!({ "manifest": out.join("manifest.jsonl"), "speakers": m.entries.len() }))
        }
        Command::BuildTasks(a) => {
            cfg.split.train = a.train.or(cfg.split.train);
            cfg.split.dev = a.dev.or(cfg.split.dev);
            cfg.split.test = a.test.or(cfg.split.test);
            write_resolved(&out, "build-tasks", &cfg)?;
            let manifest = CorpusManifest::read(&a.manifest).map_err(|e| CliError::new("manifest", e))?;
            let (corpus, report) = ingest(&manifest).map_err(|e| CliError::new("manifest", e))?;
            let names = corpus.accent_names();
            let split = match (cfg.split.train, cfg.split.dev, cfg.split.test) {
                (None, None, None) => SplitSpec::seeded(&names, cfg.seed),
                (tr, dv, te) => {
                    let defaults = SplitSpec::seeded(&names, cfg.seed).map_err(|e| CliError::new("split", e))?;
                    SplitSpec::with_counts(
                        &names,
                        tr.unwrap_or(defaults.train.len()),
                        dv.unwrap_or(defaults.dev.len()),
                        te.unwrap_or(defaults.test.len()),
                        cfg.seed,
                    )
                }
            }
            .map_err(|e| CliError::new("split", e))?;
            let splits = build_accent_task_sets(&corpus, &split, cfg.seed, cfg.train.execution)
                .map_err(|e| CliError::new("tasks", e))?;
            write_task_archive(&out, &splits, &corpus, cfg.seed).map_err(|e| CliError::new("tasks", e))?;
            write_json(&out.join("ingest_report.json"), &report)?;
            let count = |s: &[AccentTaskSet]| s.iter().map(AccentTaskSet::tq).sum::<usize>();
            Ok(serde_json::json!({
                "train_tasks": count(&splits.train),
                "dev_tasks": count(&splits.dev),
                "test_tasks": count(&splits.test),
                "dropped_speakers": report.dropped.len(),
            }))
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            t.mode = a.mode.unwrap_or(t.mode);
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.meta_batch = a.meta_batch.unwrap_or(t.meta_batch);
            t.inner_lr = a.inner_lr.unwrap_or(t.inner_lr);
            t.outer_lr = a.outer_lr.unwrap_or(t.outer_lr);
            t.noise |= a.noise;
            match a.preset {
                Some(Preset::Tiny) => t.separator = SeparatorConfig::tiny(),
                Some(Preset::Desk) => t.separator = SeparatorConfig::default(),
                None => {}
            }
            write_resolved(&out, "train", &cfg)?;
            let splits = load_archive(&a.tasks)?;
            let log_path = out.join("train_log.jsonl");
            let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
            let mut write_err = None;
            let outcome = train(&cfg.train, &splits.train, &splits.dev, &mut |line, _| {
                let r = serde_json::to_writer(&mut log, line)
                    .map_err(std::io::Error::from)
                    .and_then(|_| writeln!(log))
                    .and_then(|_| log.flush());
                if let Err(e) = r {
                    write_err.get_or_insert(e);
                }
            })
            .map_err(|e| CliError::new("train", e))?;
            if let Some(e) = write_err {
                return Err(io_err(&log_path, e));
            }
            let ckpt_path = out.join("checkpoint.msep");
            outcome.checkpoint.save(&ckpt_path).map_err(|e| CliError::new("checkpoint", e))?;
            if let Some(reason) = outcome.aborted {
                return Err(CliError::new(
                    "diverged",
                    format!("{reason}; last good checkpoint written to {}", ckpt_path.display()),
                ));
            }
            Ok(serde_json::json!({
                "checkpoint": ckpt_path,
                "config_hash": outcome.checkpoint.config_hash(),
                "outer_steps": outcome.outer_steps,
                "final": outcome.log.last(),
            }))
        }
        Command::Finetune(a) => {
            let ckpt = load_checkpoint(&a.input.checkpoint)?;
            let beta = a.beta.or(cfg.eval.beta).unwrap_or_else(|| default_beta(&ckpt));
            cfg.eval.beta = Some(beta);
            write_resolved(&out, "finetune", &cfg)?;
            let splits = load_archive(&a.input.tasks)?;
            let set = match &a.accent {
                Some(acc) => splits.test.iter().find(|s| &s.accent == acc),
                None => splits.test.first(),
            }
            .ok_or_else(|| CliError::new("tasks", "no such test accent"))?;
            let task = set
                .tasks
                .get(a.task)
                .ok_or_else(|| CliError::new("tasks", format!("accent {} has {} tasks", set.accent, set.tq())))?;
            if crate::trainer::checkpoint_train_accents(&ckpt.meta).contains(&set.accent) {
                return Err(EvalError::AccentOverlap(vec![set.accent.clone()]).into());
            }
            let noise = a.noisy.then_some(cfg.eval.noise_policy);
            let r = finetune_adapt(&ckpt.params, &ckpt.separator, task, beta, noise)
                .map_err(|e| CliError::new("finetune", e))?;
            let mut meta = ckpt.meta.clone();
            meta["finetuned"] = serde_json::json!({ "task": task.label(), "beta": beta, "noisy": a.noisy });
            let adapted = Checkpoint::new(ckpt.separator.clone(), meta, r.params.clone());
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let path = out.join("adapted.msep");
            adapted.save(&path).map_err(|e| CliError::new("checkpoint", e))?;
            let summary = serde_json::json!({
                "task": task.label(),
                "beta": beta,
                "support_loss_before": r.support_loss_before,
                "support_loss_after": r.support_loss_after,
                "query_si_snri_before": r.query_si_snri_before,
                "query_si_snri_after": r.query_si_snri_after,
                "mean_before": r.mean_before(),
                "mean_after": r.mean_after(),
                "checkpoint": path,
            });
            write_json(&out.join("adapt.json"), &summary)?;
            Ok(summary)
        }
        Command::Evaluate(a) => {
            let ckpt = load_checkpoint(&a.input.checkpoint)?;
            let beta = a.beta.or(cfg.eval.beta).unwrap_or_else(|| default_beta(&ckpt));
            cfg.eval.beta = Some(beta);
            if let Some(c) = &a.conditions {
                cfg.eval.conditions = c.clone();
            }
            write_resolved(&out, "evaluate", &cfg)?;
            let splits = load_archive(&a.input.tasks)?;
            let report = meta_test(&ckpt, &splits.test, beta, &cfg.eval)?;
            let (csv, json) = emit_report(&report, &out, "report")?;
            Ok(serde_json::json!({ "csv": csv, "json": json, "summaries": report.summaries }))
        }
        Command::SweepBeta(a) => {
            let ckpt = load_checkpoint(&a.input.checkpoint)?;
            if let Some(g) = &a.grid {
                cfg.eval.grid = g.clone();
            }
            if let Some(c) = &a.conditions {
                cfg.eval.conditions = c.clone();
            }
            write_resolved(&out, "sweep-beta", &cfg)?;
            let splits = load_archive(&a.input.tasks)?;
            let sweep = beta_sweep(&ckpt, &splits.test, &cfg.eval, a.force)?;
            let (csv, json) = emit_sweep(&sweep, &out, "sweep")?;
            Ok(serde_json::json!({ "csv": csv, "json": json, "best": sweep.best }))
        }
    }
}

/// Binary entry point: prints the JSON summary on success and a JSON error
/// object on stderr on failure.
pub fn main_entry() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(v) => {
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) if e.kind == "help" => {
            let _ = write!(std::io::stdout(), "{}", e.message);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(if e.kind == "usage" { 2 } else { 1 })
        }
    }
}
