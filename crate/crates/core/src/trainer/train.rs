use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_update, inner_adapt, meta_gradient, sgd_update, AdamState, Mode, Order, OuterOptimizer,
    SeparationObjective, TrainConfig, TrainError,
};
use crate::autodiff::{Graph, ParamVector};
use crate::dsp::{self, MixturePair, NoisePolicy};
use crate::model::{forward_separate, upit_loss_value, Checkpoint, SeparatorConfig};
use crate::par::{self, Execution};
use crate::taskgen::{derive_seed, resolve, sample_task_batch, total_tasks, AccentTaskSet, MetaTask};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mode: Mode,
    /// Mean per-mixture uPIT loss (joint) or mean per-task query loss (meta).
    pub train_loss: f64,
    /// Mean Si-SNRi over dev tasks after one fine-tune step at `dev_beta`.
    pub dev_si_snri: Option<f64>,
    pub wall_seconds: f64,
}

/// Receives each epoch's log line and the parameters at the end of that epoch.
pub type ProgressSink<'a> = &'a mut dyn FnMut(&EpochLog, &ParamVector);

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones when training diverged.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub outer_steps: usize,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

/// Outcome of one-step fine-tuning on a task's support mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptResult {
    pub params: ParamVector,
    pub support_loss_before: f64,
    pub support_loss_after: f64,
    /// Si-SNRi on each query mixture, before and after adaptation.
    pub query_si_snri_before: Vec<f64>,
    pub query_si_snri_after: Vec<f64>,
}

impl AdaptResult {
    pub fn mean_before(&self) -> f64 {
        mean(&self.query_si_snri_before)
    }

    pub fn mean_after(&self) -> f64 {
        mean(&self.query_si_snri_after)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Si-SNRi of the separator's aligned estimates on one mixture.
pub fn evaluate_pair(params: &ParamVector, cfg: &SeparatorConfig, pair: &MixturePair) -> Result<f64, TrainError> {
    let est = forward_separate(&pair.mixture, params, cfg)?;
    let est = dsp::align_estimates(&pair.sources, est)?;
    Ok(dsp::si_snr_improvement(pair, &est)?)
}

fn support_loss_value(params: &ParamVector, cfg: &SeparatorConfig, pair: &MixturePair) -> Result<f64, TrainError> {
    let est = forward_separate(&pair.mixture, params, cfg)?;
    Ok(upit_loss_value(&est, &pair.sources)?.0)
}

/// `θ_j = θ − β∇θ L_sup(θ)` followed by query evaluation at θ and θ_j.
pub fn finetune_adapt(
    theta: &ParamVector,
    cfg: &SeparatorConfig,
    task: &MetaTask,
    beta: f64,
    noise: Option<NoisePolicy>,
) -> Result<AdaptResult, TrainError> {
    let obj = SeparationObjective { config: cfg, noise };
    let support = obj.mixture(task, task.support)?;
    let queries = task
        .query
        .iter()
        .map(|&q| obj.mixture(task, q))
        .collect::<Result<Vec<_>, _>>()?;
    let before = queries
        .iter()
        .map(|p| evaluate_pair(theta, cfg, p))
        .collect::<Result<Vec<_>, _>>()?;
    let support_loss_before = support_loss_value(theta, cfg, &support)?;
    if beta == 0.0 {
        return Ok(AdaptResult {
            params: theta.clone(),
            support_loss_before,
            support_loss_after: support_loss_before,
            query_si_snri_after: before.clone(),
            query_si_snri_before: before,
        });
    }
    let adapted = inner_adapt(&obj, theta, task, beta)?;
    if !adapted.is_finite() {
        return Err(TrainError::NonFinite {
            what: "adapted parameters",
            context: task.label(),
        });
    }
    let after = queries
        .iter()
        .map(|p| evaluate_pair(&adapted, cfg, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AdaptResult {
        support_loss_after: support_loss_value(&adapted, cfg, &support)?,
        params: adapted,
        support_loss_before,
        query_si_snri_before: before,
        query_si_snri_after: after,
    })
}

/// Mean uPIT loss over `pairs` and its gradient.
pub fn joint_gradient(
    cfg: &SeparatorConfig,
    theta: &ParamVector,
    pairs: &[&MixturePair],
    exec: Execution,
) -> Result<(f64, ParamVector), TrainError> {
    let obj = SeparationObjective::new(cfg);
    let per = par::map(exec, pairs, |p| -> Result<(f64, ParamVector), TrainError> {
        let mut g = Graph::new();
        let leaves = g.bind_params(theta);
        let l = obj.pair_loss(&mut g, &leaves, p)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                what: "training loss",
                context: "joint minibatch".into(),
            });
        }
        let grads = g.grad(l, &leaves)?;
        let tensors: Vec<_> = grads.iter().map(|&n| g.value(n).clone()).collect();
        Ok((v, ParamVector::from_tensors(theta.layout().clone(), &tensors)?))
    });
    let scale = 1.0 / pairs.len() as f64;
    let mut grad = ParamVector::zeros(theta.layout().clone());
    let mut loss = 0.0;
    for r in per {
        let (l, g) = r?;
        loss += l * scale;
        grad.axpy(scale, &g);
    }
    Ok((loss, grad))
}

struct Outer {
    state: AdamState,
}

impl Outer {
    fn step(&mut self, config: &TrainConfig, theta: &mut ParamVector, grad: &ParamVector) -> Result<(), TrainError> {
        match config.optimizer {
            OuterOptimizer::Adam => adam_update(theta, grad, &mut self.state, &config.adam, config.outer_lr, config.weight_decay),
            OuterOptimizer::Sgd => sgd_update(theta, grad, config.outer_lr, config.weight_decay),
        }?;
        if !theta.is_finite() {
            return Err(TrainError::NonFinite {
                what: "parameters",
                context: "outer update".into(),
            });
        }
        Ok(())
    }
}

fn dev_score(config: &TrainConfig, theta: &ParamVector, dev: &[AccentTaskSet]) -> Result<Option<f64>, TrainError> {
    let tasks: Vec<&MetaTask> = dev.iter().flat_map(|s| &s.tasks).collect();
    if tasks.is_empty() {
        return Ok(None);
    }
    let noise = config.noise.then_some(config.noise_policy);
    let scores = par::map(config.execution, &tasks, |t| {
        finetune_adapt(theta, &config.separator, t, config.dev_beta, noise).map(|r| r.mean_after())
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(Some(total / tasks.len() as f64))
}

/// Checkpoint metadata: mode, full training config and the training accents.
pub fn checkpoint_meta(config: &TrainConfig, train_accents: &[String]) -> serde_json::Value {
    serde_json::json!({ "mode": config.mode, "train": config, "train_accents": train_accents })
}

/// Training accents recorded in a checkpoint by [`train`].
pub fn checkpoint_train_accents(meta: &serde_json::Value) -> Vec<String> {
    meta.get("train_accents")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

/// Training mode recorded in a checkpoint by [`train`].
pub fn checkpoint_mode(meta: &serde_json::Value) -> Option<Mode> {
    meta.get("mode").and_then(|v| serde_json::from_value(v.clone()).ok())
}

/// `∇θ L_sup(θ)` on a task's support mixture.
pub fn support_gradient(
    theta: &ParamVector,
    cfg: &SeparatorConfig,
    task: &MetaTask,
    noise: Option<NoisePolicy>,
) -> Result<ParamVector, TrainError> {
    let obj = SeparationObjective { config: cfg, noise };
    let pair = obj.mixture(task, task.support)?;
    let (_, g) = joint_gradient(cfg, theta, &[&pair], Execution::Sequential)?;
    Ok(g)
}

/// `θ − β·g`, rounded exactly as the graph-built inner step.
pub fn gradient_step(theta: &ParamVector, grad: &ParamVector, beta: f64) -> ParamVector {
    let v = theta.values().iter().zip(grad.values()).map(|(t, g)| t - g * beta).collect();
    theta.with_values(v)
}

/// Run joint, MAML or FOMAML training from a seeded initialization.
///
/// Joint mode shuffles the five used mixtures of every task into minibatches
/// of `joint_batch`. Meta modes draw `⌈Σtq / meta_batch⌉` batches per epoch.
pub fn train(
    config: &TrainConfig,
    train_sets: &[AccentTaskSet],
    dev_sets: &[AccentTaskSet],
    on_epoch: ProgressSink<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let total = total_tasks(train_sets);
    if total == 0 {
        return Err(TrainError::Config("no training tasks".into()));
    }
    let cfg = &config.separator;
    let mut theta = cfg.init_params(derive_seed(config.seed, "init"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batches"));
    let mut outer = Outer {
        state: AdamState::new(theta.dim()),
    };
    let obj = SeparationObjective {
        config: cfg,
        noise: config.noise.then_some(config.noise_policy),
    };
    let accents: Vec<String> = train_sets.iter().map(|s| s.accent.clone()).collect();
    let meta = checkpoint_meta(config, &accents);

    let mut pool: Vec<MixturePair> = Vec::new();
    if config.mode == Mode::Joint {
        for t in train_sets.iter().flat_map(|s| &s.tasks) {
            for m in std::iter::once(t.support).chain(t.query) {
                pool.push(obj.mixture(t, m)?);
            }
        }
    }

    let mut log = Vec::with_capacity(config.epochs);
    let mut outer_steps = 0;
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let good = theta.clone();
        let result: Result<f64, TrainError> = (|| {
            if config.mode == Mode::Joint {
                let mut order: Vec<usize> = (0..pool.len()).collect();
                order.shuffle(&mut rng);
                let mut loss = 0.0;
                for chunk in order.chunks(config.joint_batch) {
                    let pairs: Vec<&MixturePair> = chunk.iter().map(|&i| &pool[i]).collect();
                    let (l, g) = joint_gradient(cfg, &theta, &pairs, config.execution)?;
                    outer.step(config, &mut theta, &g)?;
                    outer_steps += 1;
                    loss += l * pairs.len() as f64;
                }
                Ok(loss / pool.len() as f64)
            } else {
                let order = if config.mode == Mode::Maml { Order::Second } else { Order::First };
                let b = config.meta_batch.min(total);
                let batches = total.div_ceil(b);
                let mut loss = 0.0;
                for _ in 0..batches {
                    let idx = sample_task_batch(train_sets, b, &mut rng)?;
                    let tasks = resolve(train_sets, &idx);
                    let step = meta_gradient(&obj, &theta, &tasks, config.inner_lr, order, config.execution)?;
                    outer.step(config, &mut theta, &step.grad)?;
                    outer_steps += 1;
                    loss += step.query_loss;
                }
                Ok(loss / (batches * b) as f64)
            }
        })();
        let train_loss = match result {
            Ok(l) => l,
            Err(e @ TrainError::NonFinite { .. }) => {
                return Ok(TrainOutcome {
                    checkpoint: Checkpoint::new(cfg.clone(), meta, good),
                    log,
                    outer_steps,
                    aborted: Some(format!("epoch {}: {e}", epoch + 1)),
                });
            }
            Err(e) => return Err(e),
        };
        let line = EpochLog {
            epoch: epoch + 1,
            mode: config.mode,
            train_loss,
            dev_si_snri: dev_score(config, &theta, dev_sets)?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&line, &theta);
        log.push(line);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg.clone(), meta, theta),
        log,
        outer_steps,
        aborted: None,
    })
}
