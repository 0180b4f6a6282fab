use std::fmt;
use std::sync::Arc;

use super::conv::{self, ConvSpec, Dims};
use super::{AutodiffError, ParamVector, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Comparison used by mask nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    /// `a <= b`
    LessEq,
    /// `a > b`
    Greater,
}

/// An elementwise function with a known number of derivatives.
///
/// Differentiating a [`Graph`] through a custom node of derivative order
/// `k` requires order `k + 1`; if `max_order()` is lower the gradient call
/// fails with [`AutodiffError::Unsupported`].
pub trait ScalarFn: Send + Sync {
    fn name(&self) -> &str;
    fn max_order(&self) -> usize;
    /// The `order`-th derivative at `x` (`order == 0` is the value).
    fn eval(&self, x: f64, order: usize) -> f64;
}

#[derive(Clone)]
pub(crate) enum Op {
    Param(usize),
    Input(usize),
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    /// tensor times a one-element tensor
    MulScalar(NodeId, NodeId),
    Sum(NodeId),
    /// one-element tensor repeated to the node's shape
    Expand(NodeId),
    /// `[C, T] -> [C]`
    RowSum(NodeId),
    /// `[C] -> [C, T]`
    RowBroadcast(NodeId),
    /// `x[c, t] + b[c]`
    AddRow(NodeId, NodeId),
    /// `x[c, t] * s[c]`
    MulRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Log10(NodeId),
    Min(NodeId, NodeId),
    Mask(NodeId, NodeId, Cmp),
    Conv(NodeId, NodeId, ConvSpec),
    ConvTranspose(NodeId, NodeId, ConvSpec),
    ConvWeightGrad(NodeId, NodeId, ConvSpec),
    Detach(NodeId),
    Custom(NodeId, Arc<dyn ScalarFn>, usize),
}

impl Op {
    pub(crate) fn name(&self) -> String {
        match self {
            Op::Param(_) => "param".into(),
            Op::Input(_) => "input".into(),
            Op::Const => "const".into(),
            Op::Add(..) => "add".into(),
            Op::Sub(..) => "sub".into(),
            Op::Neg(_) => "neg".into(),
            Op::Mul(..) => "mul".into(),
            Op::Scale(..) => "scale".into(),
            Op::AddConst(..) => "add_const".into(),
            Op::MulScalar(..) => "mul_scalar".into(),
            Op::Sum(_) => "sum".into(),
            Op::Expand(_) => "expand".into(),
            Op::RowSum(_) => "row_sum".into(),
            Op::RowBroadcast(_) => "row_broadcast".into(),
            Op::AddRow(..) => "add_row".into(),
            Op::MulRow(..) => "mul_row".into(),
            Op::Sigmoid(_) => "sigmoid".into(),
            Op::Relu(_) => "relu".into(),
            Op::Recip(_) => "recip".into(),
            Op::Sqrt(_) => "sqrt".into(),
            Op::Log10(_) => "log10".into(),
            Op::Min(..) => "min".into(),
            Op::Mask(..) => "mask".into(),
            Op::Conv(..) => "conv1d".into(),
            Op::ConvTranspose(..) => "conv_transpose1d".into(),
            Op::ConvWeightGrad(..) => "conv_weight_grad".into(),
            Op::Detach(_) => "detach".into(),
            Op::Custom(_, f, order) => format!("{}^({order})", f.name()),
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Param(_) | Op::Input(_) | Op::Const => vec![],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::RowSum(a)
            | Op::RowBroadcast(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Log10(a)
            | Op::Detach(a)
            | Op::Custom(a, _, _) => vec![a],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Min(a, b)
            | Op::Mask(a, b, _)
            | Op::Conv(a, b, _)
            | Op::ConvTranspose(a, b, _)
            | Op::ConvWeightGrad(a, b, _) => vec![a, b],
        }
    }

    /// Ops through which no gradient flows.
    pub(crate) fn blocks_gradient(&self) -> bool {
        matches!(self, Op::Const | Op::Detach(_) | Op::Mask(..))
    }
}

#[derive(Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
}

/// A recorded computation over tensors.
///
/// Nodes are evaluated eagerly as they are appended, so every node's value
/// is available right away; [`Graph::evaluate`] replays the same tape on
/// new parameter and input values. Gradients ([`Graph::grad`]) are appended
/// as ordinary nodes, so they can be differentiated again.
#[derive(Clone, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: Vec<NodeId>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .field("inputs", &self.inputs.len())
            .field("outputs", &self.outputs)
            .finish()
    }
}

fn mismatch(node: usize, op: &str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        node,
        op: op.to_string(),
        detail,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> String {
        self.nodes[id.0].op.name()
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    /// Smallest distance of any rectifier input from zero, or of any
    /// min/mask operand pair from a tie, at the recorded values.
    ///
    /// Finite-difference checks are only meaningful when this exceeds the
    /// perturbation the step can cause.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.value(*a).data() {
                        m = m.min(v.abs());
                    }
                }
                Op::Min(a, b) | Op::Mask(a, b, _) => {
                    for (x, y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        m = m.min((x - y).abs());
                    }
                }
                _ => {}
            }
        }
        m
    }

    pub fn set_outputs(&mut self, outputs: Vec<NodeId>) {
        self.outputs = outputs;
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId, AutodiffError> {
        for i in op.inputs() {
            self.check(i)?;
        }
        let index = self.nodes.len();
        let value = compute(&op, index, |id| &self.nodes[id.0].value, None)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(index))
    }

    // --- leaves -----------------------------------------------------------

    /// Register a parameter leaf holding `value`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param(self.params.len()),
            value,
        });
        self.params.push(id);
        id
    }

    /// One parameter leaf per layout entry of `params`, in layout order.
    pub fn bind_params(&mut self, params: &ParamVector) -> Vec<NodeId> {
        params.tensors().into_iter().map(|t| self.param(t)).collect()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input(self.inputs.len()),
            value,
        });
        self.inputs.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Const,
            value,
        });
        id
    }

    // --- primitives -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Neg(a))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::AddConst(a, c))
    }

    /// `a * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::MulScalar(a, s))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sum(a))
    }

    /// Repeat the single value of `s` into a tensor of `shape`.
    pub fn expand(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.check(s)?;
        let index = self.nodes.len();
        if !self.value(s).is_scalar() {
            return Err(mismatch(index, "expand", format!("{:?} is not a scalar", self.shape(s))));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(AutodiffError::InvalidShape(shape.to_vec()));
        }
        let value = Tensor::full(shape, self.value(s).item());
        self.nodes.push(Node {
            op: Op::Expand(s),
            value,
        });
        Ok(NodeId(index))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::RowSum(a))
    }

    /// `[C] -> [C, len]`
    pub fn row_broadcast(&mut self, a: NodeId, len: usize) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let index = self.nodes.len();
        let src = self.value(a);
        if src.shape().len() != 1 || len == 0 {
            return Err(mismatch(index, "row_broadcast", format!("{:?}", src.shape())));
        }
        let c = src.shape()[0];
        let mut data = Vec::with_capacity(c * len);
        for &v in src.data() {
            data.extend(std::iter::repeat_n(v, len));
        }
        let value = Tensor::from_parts(vec![c, len], data);
        self.nodes.push(Node {
            op: Op::RowBroadcast(a),
            value,
        });
        Ok(NodeId(index))
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::AddRow(x, b))
    }

    pub fn mul_row(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::MulRow(x, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Relu(a))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sqrt(a))
    }

    pub fn log10(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Log10(a))
    }

    /// Elementwise minimum; ties take `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Min(a, b))
    }

    /// Elementwise maximum; ties take `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let na = self.neg(a)?;
        let nb = self.neg(b)?;
        let m = self.min(na, nb)?;
        self.neg(m)
    }

    /// 0/1 indicator of the comparison; carries no gradient.
    pub fn mask(&mut self, a: NodeId, b: NodeId, cmp: Cmp) -> Result<NodeId, AutodiffError> {
        self.push(Op::Mask(a, b, cmp))
    }

    /// `x: [C_in, T]`, `w: [C_out, C_in / groups, K]` -> `[C_out, T']`
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId, AutodiffError> {
        self.push(Op::Conv(x, w, spec))
    }

    /// Adjoint of [`Graph::conv1d`] in its input: `g: [C_out, T']` gives
    /// `[C_in, t_in]`. `t_in` must map to `T'` under `spec`.
    pub fn conv_transpose1d(
        &mut self,
        g: NodeId,
        w: NodeId,
        spec: ConvSpec,
        t_in: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.check(g)?;
        self.check(w)?;
        let index = self.nodes.len();
        let op = Op::ConvTranspose(g, w, spec);
        let value = compute(&op, index, |id| &self.nodes[id.0].value, Some(&[t_in]))?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(index))
    }

    /// Adjoint of [`Graph::conv1d`] in its weight, for a kernel of size `kernel`.
    pub fn conv_weight_grad(
        &mut self,
        x: NodeId,
        g: NodeId,
        spec: ConvSpec,
        kernel: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        self.check(g)?;
        let index = self.nodes.len();
        let op = Op::ConvWeightGrad(x, g, spec);
        let value = compute(&op, index, |id| &self.nodes[id.0].value, Some(&[kernel]))?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(index))
    }

    /// Same value as `a`, but no gradient flows back through it.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Detach(a))
    }

    pub fn custom(&mut self, a: NodeId, f: Arc<dyn ScalarFn>) -> Result<NodeId, AutodiffError> {
        self.push(Op::Custom(a, f, 0))
    }

    // --- composites -------------------------------------------------------

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    pub fn sq_norm(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.dot(a, a)
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let r = self.recip(s)?;
        self.mul_scalar(x, r)
    }

    /// Parametric rectifier with a single learned negative slope.
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId, AutodiffError> {
        let pos = self.relu(x)?;
        let neg = self.sub(x, pos)?;
        let scaled = self.mul_scalar(neg, slope)?;
        self.add(pos, scaled)
    }

    /// Normalization over channels and time jointly, with per-channel gain
    /// and bias: `gamma ⊙ (x − mean) / sqrt(var + eps) + beta`.
    pub fn global_layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let mu = self.mean(x)?;
        let mu_full = self.expand(mu, &shape)?;
        let centered = self.sub(x, mu_full)?;
        let sq = self.mul(centered, centered)?;
        let var = self.mean(sq)?;
        let var_eps = self.add_const(var, eps)?;
        let std = self.sqrt(var_eps)?;
        let normed = self.div_scalar(centered, std)?;
        let scaled = self.mul_row(normed, gamma)?;
        self.add_row(scaled, beta)
    }

    // --- evaluation and differentiation -----------------------------------

    /// Recompute every node with new parameter and input values.
    ///
    /// Returns the values of all nodes, indexed like the graph.
    pub fn evaluate(
        &self,
        params: &[Tensor],
        inputs: &[Tensor],
    ) -> Result<Vec<Tensor>, AutodiffError> {
        if params.len() != self.params.len() {
            return Err(AutodiffError::LeafCount {
                kind: "param",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if inputs.len() != self.inputs.len() {
            return Err(AutodiffError::LeafCount {
                kind: "input",
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (index, node) in self.nodes.iter().enumerate() {
            let leaf = match node.op {
                Op::Param(i) => Some(&params[i]),
                Op::Input(i) => Some(&inputs[i]),
                _ => None,
            };
            let v = match leaf {
                Some(t) => {
                    if t.shape() != node.value.shape() {
                        return Err(mismatch(
                            index,
                            &node.op.name(),
                            format!("expected {:?}, got {:?}", node.value.shape(), t.shape()),
                        ));
                    }
                    t.clone()
                }
                None => match &node.op {
                    Op::Const => node.value.clone(),
                    op => {
                        let extra = extra_dim(op, &node.value);
                        compute(op, index, |id| &values[id.0], extra.as_ref().map(|e| &e[..]))?
                    }
                },
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Values of the declared outputs for new parameters and inputs.
    pub fn forward(
        &self,
        params: &ParamVector,
        inputs: &[Tensor],
    ) -> Result<Vec<Tensor>, AutodiffError> {
        let values = self.evaluate(&params.tensors(), inputs)?;
        Ok(self.outputs.iter().map(|o| values[o.0].clone()).collect())
    }

    /// Append nodes computing `d y / d w` for every `w` in `wrt`.
    ///
    /// `y` must hold a single value. The returned nodes are ordinary graph
    /// nodes and may themselves be differentiated.
    pub fn grad(&mut self, y: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AutodiffError> {
        self.check(y)?;
        for &w in wrt {
            self.check(w)?;
        }
        if !self.value(y).is_scalar() {
            return Err(AutodiffError::NonScalarOutput {
                node: y.0,
                shape: self.shape(y).to_vec(),
            });
        }
        let n = y.0 + 1;
        let mut depends = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for i in 0..n {
            if depends[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            if !op.blocks_gradient() {
                depends[i] = op.inputs().iter().any(|p| depends[p.0]);
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        if depends[y.0] {
            let shape = self.shape(y).to_vec();
            adjoint[y.0] = Some(self.constant(Tensor::full(&shape, 1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if op.blocks_gradient() {
                continue;
            }
            for (input, contribution) in self.vjp(NodeId(i), &op, g)? {
                if !depends[input.0] {
                    continue;
                }
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of node `id` for upstream adjoint `g`,
    /// built from differentiable primitives.
    fn vjp(&mut self, id: NodeId, op: &Op, g: NodeId) -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
        Ok(match *op {
            Op::Param(_) | Op::Input(_) | Op::Const | Op::Detach(_) | Op::Mask(..) => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, self.neg(g)?)],
            Op::Neg(a) => vec![(a, self.neg(g)?)],
            Op::Mul(a, b) => vec![(a, self.mul(g, b)?), (b, self.mul(g, a)?)],
            Op::Scale(a, c) => vec![(a, self.scale(g, c)?)],
            Op::AddConst(a, _) => vec![(a, g)],
            Op::MulScalar(a, s) => {
                let da = self.mul_scalar(g, s)?;
                let ds = self.dot(g, a)?;
                vec![(a, da), (s, ds)]
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.expand(g, &shape)?)]
            }
            Op::Expand(s) => vec![(s, self.sum(g)?)],
            Op::RowSum(a) => {
                let len = self.shape(a)[1];
                vec![(a, self.row_broadcast(g, len)?)]
            }
            Op::RowBroadcast(a) => vec![(a, self.row_sum(g)?)],
            Op::AddRow(x, b) => vec![(x, g), (b, self.row_sum(g)?)],
            Op::MulRow(x, s) => {
                let dx = self.mul_row(g, s)?;
                let gx = self.mul(g, x)?;
                let ds = self.row_sum(gx)?;
                vec![(x, dx), (s, ds)]
            }
            Op::Sigmoid(a) => {
                let one_minus = {
                    let n = self.neg(id)?;
                    self.add_const(n, 1.0)?
                };
                let d = self.mul(id, one_minus)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Relu(a) => {
                let zero = self.constant(Tensor::zeros(self.shape(a)));
                let m = self.mask(a, zero, Cmp::Greater)?;
                vec![(a, self.mul(g, m)?)]
            }
            Op::Recip(a) => {
                let sq = self.mul(id, id)?;
                let gs = self.mul(g, sq)?;
                vec![(a, self.neg(gs)?)]
            }
            Op::Sqrt(a) => {
                let r = self.recip(id)?;
                let gr = self.mul(g, r)?;
                vec![(a, self.scale(gr, 0.5)?)]
            }
            Op::Log10(a) => {
                let r = self.recip(a)?;
                let gr = self.mul(g, r)?;
                vec![(a, self.scale(gr, 1.0 / std::f64::consts::LN_10)?)]
            }
            Op::Min(a, b) => {
                let ma = self.mask(a, b, Cmp::LessEq)?;
                let mb = self.mask(a, b, Cmp::Greater)?;
                vec![(a, self.mul(g, ma)?), (b, self.mul(g, mb)?)]
            }
            Op::Conv(x, w, spec) => {
                let t_in = self.shape(x)[1];
                let k = self.shape(w)[2];
                let dx = self.conv_transpose1d(g, w, spec, t_in)?;
                let dw = self.conv_weight_grad(x, g, spec, k)?;
                vec![(x, dx), (w, dw)]
            }
            Op::ConvTranspose(gy, w, spec) => {
                let k = self.shape(w)[2];
                let dgy = self.conv1d(g, w, spec)?;
                let dw = self.conv_weight_grad(g, gy, spec, k)?;
                vec![(gy, dgy), (w, dw)]
            }
            Op::ConvWeightGrad(x, gy, spec) => {
                let t_in = self.shape(x)[1];
                let dx = self.conv_transpose1d(gy, g, spec, t_in)?;
                let dgy = self.conv1d(x, g, spec)?;
                vec![(x, dx), (gy, dgy)]
            }
            Op::Custom(a, ref f, order) => {
                if order + 1 > f.max_order() {
                    return Err(AutodiffError::Unsupported {
                        node: id.0,
                        op: op.name(),
                    });
                }
                let d = self.push(Op::Custom(a, f.clone(), order + 1))?;
                vec![(a, self.mul(g, d)?)]
            }
        })
    }
}

/// The shape parameter an op cannot infer from its inputs (`t_in` for the
/// transposed convolution, kernel size for the weight gradient, target
/// shape for expand/broadcast).
fn extra_dim(op: &Op, value: &Tensor) -> Option<Vec<usize>> {
    match op {
        Op::ConvTranspose(..) => Some(vec![value.shape()[1]]),
        Op::ConvWeightGrad(..) => Some(vec![value.shape()[2]]),
        Op::Expand(_) | Op::RowBroadcast(_) => Some(value.shape().to_vec()),
        _ => None,
    }
}

fn same_shape(index: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(index, &op.name(), format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn conv_dims(
    index: usize,
    op: &Op,
    spec: &ConvSpec,
    c_in: usize,
    t_in: usize,
    w_shape: &[usize],
) -> Result<Dims, AutodiffError> {
    let bad = |d: String| mismatch(index, &op.name(), d);
    if w_shape.len() != 3 {
        return Err(bad(format!("weight shape {w_shape:?} is not [C_out, C_in/groups, K]")));
    }
    let (c_out, cpg, kernel) = (w_shape[0], w_shape[1], w_shape[2]);
    if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(bad(format!("groups {} incompatible with {c_in} -> {c_out}", spec.groups)));
    }
    if cpg * spec.groups != c_in {
        return Err(bad(format!("weight expects {} input channels, got {c_in}", cpg * spec.groups)));
    }
    let t_out = spec
        .output_len(t_in, kernel)
        .ok_or_else(|| bad(format!("input length {t_in} shorter than kernel span")))?;
    Ok(Dims {
        c_in,
        t_in,
        c_out,
        t_out,
        kernel,
    })
}

fn two_d(index: usize, op: &Op, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    match *t.shape() {
        [c, len] => Ok((c, len)),
        _ => Err(mismatch(index, &op.name(), format!("expected [C, T], got {:?}", t.shape()))),
    }
}

/// Evaluate one op. `extra` carries the shape value that some ops cannot infer.
fn compute<'a>(
    op: &Op,
    index: usize,
    get: impl Fn(NodeId) -> &'a Tensor,
    extra: Option<&[usize]>,
) -> Result<Tensor, AutodiffError> {
    let bad = |d: String| mismatch(index, &op.name(), d);
    Ok(match *op {
        Op::Param(_) | Op::Input(_) | Op::Const => unreachable!("leaves are not computed"),
        Op::Add(a, b) => {
            let (a, b) = (get(a), get(b));
            same_shape(index, op, a, b)?;
            a.zip(b, |x, y| x + y)
        }
        Op::Sub(a, b) => {
            let (a, b) = (get(a), get(b));
            same_shape(index, op, a, b)?;
            a.zip(b, |x, y| x - y)
        }
        Op::Mul(a, b) => {
            let (a, b) = (get(a), get(b));
            same_shape(index, op, a, b)?;
            a.zip(b, |x, y| x * y)
        }
        Op::Min(a, b) => {
            let (a, b) = (get(a), get(b));
            same_shape(index, op, a, b)?;
            a.zip(b, |x, y| if x <= y { x } else { y })
        }
        Op::Mask(a, b, cmp) => {
            let (a, b) = (get(a), get(b));
            same_shape(index, op, a, b)?;
            match cmp {
                Cmp::LessEq => a.zip(b, |x, y| if x <= y { 1.0 } else { 0.0 }),
                Cmp::Greater => a.zip(b, |x, y| if x > y { 1.0 } else { 0.0 }),
            }
        }
        Op::Neg(a) => get(a).map(|x| -x),
        Op::Scale(a, c) => get(a).map(|x| c * x),
        Op::AddConst(a, c) => get(a).map(|x| x + c),
        Op::MulScalar(a, s) => {
            let s = get(s);
            if !s.is_scalar() {
                return Err(bad(format!("scalar operand has shape {:?}", s.shape())));
            }
            let s = s.item();
            get(a).map(|x| x * s)
        }
        Op::Sum(a) => Tensor::scalar(get(a).data().iter().sum()),
        Op::Expand(s) => {
            let s = get(s);
            if !s.is_scalar() {
                return Err(bad(format!("{:?} is not a scalar", s.shape())));
            }
            Tensor::full(extra.expect("expand shape"), s.item())
        }
        Op::RowSum(a) => {
            let a = get(a);
            let (c, len) = two_d(index, op, a)?;
            let data = a.data().chunks(len).map(|r| r.iter().sum()).collect();
            Tensor::from_parts(vec![c], data)
        }
        Op::RowBroadcast(a) => {
            let a = get(a);
            let shape = extra.expect("broadcast shape");
            if a.shape().len() != 1 || shape.len() != 2 || shape[0] != a.shape()[0] {
                return Err(bad(format!("{:?} -> {shape:?}", a.shape())));
            }
            let mut data = Vec::with_capacity(shape[0] * shape[1]);
            for &v in a.data() {
                data.extend(std::iter::repeat_n(v, shape[1]));
            }
            Tensor::from_parts(shape.to_vec(), data)
        }
        Op::AddRow(x, b) | Op::MulRow(x, b) => {
            let (x, b) = (get(x), get(b));
            let (c, len) = two_d(index, op, x)?;
            if b.shape() != [c] {
                return Err(bad(format!("row operand {:?} for [{c}, {len}]", b.shape())));
            }
            let add = matches!(op, Op::AddRow(..));
            let mut data = x.data().to_vec();
            for (row, &bv) in data.chunks_mut(len).zip(b.data()) {
                if add {
                    row.iter_mut().for_each(|v| *v += bv);
                } else {
                    row.iter_mut().for_each(|v| *v *= bv);
                }
            }
            Tensor::from_parts(vec![c, len], data)
        }
        Op::Sigmoid(a) => get(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }),
        Op::Relu(a) => get(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Recip(a) => get(a).map(|x| 1.0 / x),
        Op::Sqrt(a) => get(a).map(f64::sqrt),
        Op::Log10(a) => get(a).map(f64::log10),
        Op::Detach(a) => get(a).clone(),
        Op::Custom(a, ref f, order) => get(a).map(|x| f.eval(x, order)),
        Op::Conv(x, w, spec) => {
            let (x, w) = (get(x), get(w));
            let (c_in, t_in) = two_d(index, op, x)?;
            let dims = conv_dims(index, op, &spec, c_in, t_in, w.shape())?;
            let y = conv::forward(x.data(), w.data(), &dims, &spec);
            Tensor::from_parts(vec![dims.c_out, dims.t_out], y)
        }
        Op::ConvTranspose(g, w, spec) => {
            let (g, w) = (get(g), get(w));
            let (c_out, t_out) = two_d(index, op, g)?;
            let t_in = extra.expect("transpose length")[0];
            if w.shape().len() != 3 {
                return Err(bad(format!("weight shape {:?}", w.shape())));
            }
            let c_in = w.shape()[1] * spec.groups;
            let dims = conv_dims(index, op, &spec, c_in, t_in, w.shape())?;
            if dims.c_out != c_out || dims.t_out != t_out {
                return Err(bad(format!(
                    "upstream [{c_out}, {t_out}] does not match conv output [{}, {}]",
                    dims.c_out, dims.t_out
                )));
            }
            let dx = conv::transpose(g.data(), w.data(), &dims, &spec);
            Tensor::from_parts(vec![c_in, t_in], dx)
        }
        Op::ConvWeightGrad(x, g, spec) => {
            let (x, g) = (get(x), get(g));
            let (c_in, t_in) = two_d(index, op, x)?;
            let (c_out, t_out) = two_d(index, op, g)?;
            let kernel = extra.expect("kernel size")[0];
            if spec.groups == 0 || c_in % spec.groups != 0 {
                return Err(bad(format!("groups {} for {c_in} channels", spec.groups)));
            }
            let w_shape = [c_out, c_in / spec.groups, kernel];
            let dims = conv_dims(index, op, &spec, c_in, t_in, &w_shape)?;
            if dims.t_out != t_out {
                return Err(bad(format!("upstream length {t_out}, expected {}", dims.t_out)));
            }
            let dw = conv::weight_grad(x.data(), g.data(), &dims, &spec);
            Tensor::from_parts(w_shape.to_vec(), dw)
        }
    })
}
