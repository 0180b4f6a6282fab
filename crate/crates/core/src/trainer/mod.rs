//! Joint training, MAML and FOMAML over meta tasks, plus one-step
//! fine-tuning.
//!
//! The inner step `θ′ = θ − α∇θ L_sup(θ)` is recorded on the same graph as
//! the loss, so differentiating the query loss at `θ′` with respect to `θ`
//! yields the full second-order meta-gradient. Detaching `θ′` before the
//! query pass severs that dependence and yields the first-order variant.

mod adam;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamVector};
use crate::dsp::{MixturePair, NoisePolicy};
use crate::model::{upit_loss, CheckpointError, ModelError, Separator, SeparatorConfig};
use crate::par::{self, Execution};
use crate::taskgen::{derive_seed, MetaTask, TaskError};

pub use adam::{adam_update, sgd_update, AdamConfig, AdamState};
pub use train::{
    checkpoint_meta, checkpoint_mode, checkpoint_train_accents, evaluate_pair, finetune_adapt, gradient_step,
    joint_gradient, support_gradient, train, AdaptResult, EpochLog, ProgressSink, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {what} for {context}")]
    NonFinite { what: &'static str, context: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl From<crate::dsp::DspError> for TrainError {
    fn from(e: crate::dsp::DspError) -> Self {
        TrainError::Model(ModelError::Dsp(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Joint,
    Maml,
    Fomaml,
}

impl Mode {
    pub fn is_meta(self) -> bool {
        self != Mode::Joint
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::Maml => "maml",
            Mode::Fomaml => "fomaml",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Mode::Joint),
            "maml" => Ok(Mode::Maml),
            "fomaml" => Ok(Mode::Fomaml),
            _ => Err(format!("unknown mode {s:?} (expected joint, maml or fomaml)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    Adam,
    /// Plain gradient descent, `θ ← θ − lr·g`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// α
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub epochs: usize,
    /// Tasks per meta batch.
    pub meta_batch: usize,
    /// Mixtures per joint-training minibatch.
    pub joint_batch: usize,
    pub optimizer: OuterOptimizer,
    pub adam: AdamConfig,
    pub weight_decay: f64,
    /// Train on noisy mixtures.
    pub noise: bool,
    pub noise_policy: NoisePolicy,
    pub seed: u64,
    /// Fine-tune rate for the per-epoch dev evaluation.
    pub dev_beta: f64,
    pub separator: SeparatorConfig,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Fomaml,
            inner_lr: 0.01,
            outer_lr: 1e-3,
            epochs: 100,
            meta_batch: 4,
            joint_batch: 4,
            optimizer: OuterOptimizer::Adam,
            adam: AdamConfig::default(),
            weight_decay: 1e-5,
            noise: false,
            noise_policy: NoisePolicy::default(),
            seed: 0,
            dev_beta: 0.01,
            separator: SeparatorConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.separator.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.mode.is_meta() && !(self.inner_lr > 0.0) {
            return bad("inner_lr must be positive for meta modes");
        }
        if !(self.outer_lr.is_finite() && self.outer_lr >= 0.0) {
            return bad("outer_lr must be finite and non-negative");
        }
        if self.meta_batch == 0 || self.joint_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        Ok(())
    }
}

/// Support and query losses of a task family, expressed on graph nodes.
pub trait MetaObjective: Sync {
    type Task: Sync;

    fn support_loss(&self, g: &mut Graph, params: &[NodeId], task: &Self::Task) -> Result<NodeId, TrainError>;
    fn query_loss(&self, g: &mut Graph, params: &[NodeId], task: &Self::Task) -> Result<NodeId, TrainError>;
    fn label(&self, task: &Self::Task) -> String;
}

/// uPIT losses of the separator on a task's support mixture and on the mean
/// of its four query mixtures.
pub struct SeparationObjective<'a> {
    pub config: &'a SeparatorConfig,
    /// Noise applied to every mixture, seeded by the task's noise seed.
    pub noise: Option<NoisePolicy>,
}

impl<'a> SeparationObjective<'a> {
    pub fn new(config: &'a SeparatorConfig) -> Self {
        Self { config, noise: None }
    }

    /// uPIT loss of one mixture.
    pub fn pair_loss(&self, g: &mut Graph, params: &[NodeId], pair: &MixturePair) -> Result<NodeId, TrainError> {
        let sep = Separator::new(self.config, params.to_vec())?;
        let x = g.input(crate::autodiff::Tensor::row(pair.mixture.samples.clone()));
        let est = sep.forward(g, x)?;
        Ok(upit_loss(g, est, &pair.sources)?.loss)
    }

    /// The task's mixture `m`, noisy when a policy is set.
    pub fn mixture(&self, task: &MetaTask, m: usize) -> Result<MixturePair, TrainError> {
        match &self.noise {
            None => Ok(task.mixtures[m].clone()),
            Some(p) => Ok(p.apply(&task.mixtures[m], derive_seed(task.noise_seed, &format!("mix{m}")))?),
        }
    }
}

impl MetaObjective for SeparationObjective<'_> {
    type Task = MetaTask;

    fn support_loss(&self, g: &mut Graph, params: &[NodeId], task: &MetaTask) -> Result<NodeId, TrainError> {
        let pair = self.mixture(task, task.support)?;
        self.pair_loss(g, params, &pair)
    }

    fn query_loss(&self, g: &mut Graph, params: &[NodeId], task: &MetaTask) -> Result<NodeId, TrainError> {
        let mut total: Option<NodeId> = None;
        for &q in &task.query {
            let pair = self.mixture(task, q)?;
            let l = self.pair_loss(g, params, &pair)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.expect("four queries");
        Ok(g.scale(total, 1.0 / task.query.len() as f64)?)
    }

    fn label(&self, task: &MetaTask) -> String {
        task.label()
    }
}

fn check_finite(g: &Graph, node: NodeId, what: &'static str, context: impl FnOnce() -> String) -> Result<f64, TrainError> {
    let v = g.value(node).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite {
            what,
            context: context(),
        })
    }
}

/// The inner step on graph nodes: returns `θ′` (still a function of
/// `theta`) and the support-loss node.
pub fn inner_adapt_nodes<O: MetaObjective>(
    obj: &O,
    g: &mut Graph,
    theta: &[NodeId],
    task: &O::Task,
    alpha: f64,
) -> Result<(Vec<NodeId>, NodeId), TrainError> {
    let sup = obj.support_loss(g, theta, task)?;
    check_finite(g, sup, "support loss", || obj.label(task))?;
    let grads = g.grad(sup, theta)?;
    let mut adapted = Vec::with_capacity(theta.len());
    for (&t, &d) in theta.iter().zip(&grads) {
        let step = g.scale(d, alpha)?;
        adapted.push(g.sub(t, step)?);
    }
    Ok((adapted, sup))
}

/// `θ′ = θ − α∇θ L_sup(θ)` as plain values.
pub fn inner_adapt<O: MetaObjective>(obj: &O, theta: &ParamVector, task: &O::Task, alpha: f64) -> Result<ParamVector, TrainError> {
    let mut g = Graph::new();
    let leaves = g.bind_params(theta);
    let (adapted, _) = inner_adapt_nodes(obj, &mut g, &leaves, task, alpha)?;
    collect(&g, &adapted, theta)
}

fn collect(g: &Graph, nodes: &[NodeId], like: &ParamVector) -> Result<ParamVector, TrainError> {
    let tensors: Vec<_> = nodes.iter().map(|&n| g.value(n).clone()).collect();
    Ok(ParamVector::from_tensors(like.layout().clone(), &tensors)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    /// Differentiate through the inner step.
    Second,
    /// Treat `θ′` as a constant.
    First,
}

/// Meta-gradient over a batch with the summed losses it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaStep {
    pub grad: ParamVector,
    /// Σ_j L_qry_j(θ′_j)
    pub query_loss: f64,
    /// Σ_j L_sup_j(θ)
    pub support_loss: f64,
}

fn task_meta_gradient<O: MetaObjective>(
    obj: &O,
    theta: &ParamVector,
    task: &O::Task,
    alpha: f64,
    order: Order,
) -> Result<(ParamVector, f64, f64), TrainError> {
    let mut g = Graph::new();
    let leaves = g.bind_params(theta);
    let (adapted, sup) = inner_adapt_nodes(obj, &mut g, &leaves, task, alpha)?;
    let support_loss = g.value(sup).item();
    let (params, wrt) = match order {
        Order::Second => (adapted, leaves),
        Order::First => {
            let detached = adapted
                .iter()
                .map(|&a| g.detach(a))
                .collect::<Result<Vec<_>, _>>()?;
            (detached.clone(), detached)
        }
    };
    let q = obj.query_loss(&mut g, &params, task)?;
    let query_loss = check_finite(&g, q, "query loss", || obj.label(task))?;
    let grads = g.grad(q, &wrt)?;
    let grad = collect(&g, &grads, theta)?;
    if !grad.is_finite() {
        return Err(TrainError::NonFinite {
            what: "meta-gradient",
            context: obj.label(task),
        });
    }
    Ok((grad, query_loss, support_loss))
}

/// `Σ_j ∇θ L_qry_j(θ′_j)`; tasks run concurrently and are reduced in the
/// given order.
pub fn meta_gradient<O: MetaObjective>(
    obj: &O,
    theta: &ParamVector,
    tasks: &[&O::Task],
    alpha: f64,
    order: Order,
    exec: Execution,
) -> Result<MetaStep, TrainError> {
    let per_task = par::map(exec, tasks, |t| task_meta_gradient(obj, theta, t, alpha, order));
    let mut grad = ParamVector::zeros(theta.layout().clone());
    let mut query_loss = 0.0;
    let mut support_loss = 0.0;
    for r in per_task {
        let (g, q, s) = r?;
        grad.axpy(1.0, &g);
        query_loss += q;
        support_loss += s;
    }
    Ok(MetaStep {
        grad,
        query_loss,
        support_loss,
    })
}

/// Full second-order meta-gradient.
pub fn meta_gradient_maml<O: MetaObjective>(
    obj: &O,
    theta: &ParamVector,
    tasks: &[&O::Task],
    alpha: f64,
    exec: Execution,
) -> Result<MetaStep, TrainError> {
    meta_gradient(obj, theta, tasks, alpha, Order::Second, exec)
}

/// First-order meta-gradient: query gradients at `θ′_j` with `θ′_j` held fixed.
pub fn meta_gradient_fomaml<O: MetaObjective>(
    obj: &O,
    theta: &ParamVector,
    tasks: &[&O::Task],
    alpha: f64,
    exec: Execution,
) -> Result<MetaStep, TrainError> {
    meta_gradient(obj, theta, tasks, alpha, Order::First, exec)
}

/// `Σ_j L_qry_j(θ′_j)` as a number; the quantity the meta-gradient differentiates.
pub fn meta_objective<O: MetaObjective>(obj: &O, theta: &ParamVector, tasks: &[&O::Task], alpha: f64) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for t in tasks {
        let mut g = Graph::new();
        let leaves = g.bind_params(theta);
        let (adapted, _) = inner_adapt_nodes(obj, &mut g, &leaves, t, alpha)?;
        let q = obj.query_loss(&mut g, &adapted, t)?;
        total += g.value(q).item();
    }
    Ok(total)
}

/// `Σ_j ∇θ L_qry_j(θ)` with no adaptation.
pub fn pooled_query_gradient<O: MetaObjective>(
    obj: &O,
    theta: &ParamVector,
    tasks: &[&O::Task],
    exec: Execution,
) -> Result<ParamVector, TrainError> {
    let per_task = par::map(exec, tasks, |t| -> Result<ParamVector, TrainError> {
        let mut g = Graph::new();
        let leaves = g.bind_params(theta);
        let q = obj.query_loss(&mut g, &leaves, t)?;
        let grads = g.grad(q, &leaves)?;
        collect(&g, &grads, theta)
    });
    let mut grad = ParamVector::zeros(theta.layout().clone());
    for r in per_task {
        grad.axpy(1.0, &r?);
    }
    Ok(grad)
}
