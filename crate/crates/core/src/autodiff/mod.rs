//! Reverse-mode differentiation over recorded tensor graphs.
//!
//! Gradients are appended to the same [`Graph`] as ordinary nodes, so a
//! gradient can be differentiated again. That is what second-order
//! meta-gradients need: an adapted parameter `θ − α∇L(θ)` is just another
//! node that depends on `θ`.
//!
//! ```
//! use metasep::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(2.0));
//! let x2 = g.mul(x, x).unwrap();
//! let x3 = g.mul(x2, x).unwrap();
//! let dx = g.grad(x3, &[x]).unwrap()[0];
//! let ddx = g.grad(dx, &[x]).unwrap()[0];
//! assert_eq!(g.value(dx).item(), 12.0);
//! assert_eq!(g.value(ddx).item(), 12.0);
//! ```

mod conv;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use conv::ConvSpec;
pub use graph::{Cmp, Graph, NodeId, ScalarFn};
pub use params::{Layout, LayoutEntry, ParamVector};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("invalid parameter layout at entry `{0}`")]
    BadLayout(String),
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: String,
        detail: String,
    },
    #[error("expected {expected} {kind} tensors, got {got}")]
    LeafCount {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("gradient needs a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("node {node} ({op}) has no registered derivative of the required order")]
    Unsupported { node: usize, op: String },
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

/// Values of `graph`'s declared outputs for the given parameters and inputs.
pub fn forward(
    graph: &Graph,
    params: &ParamVector,
    inputs: &[Tensor],
) -> Result<Vec<Tensor>, AutodiffError> {
    graph.forward(params, inputs)
}

/// `d output / d params` for a graph whose single declared output is a
/// scalar loss and whose parameter leaves follow `params`' layout.
pub fn gradient(
    graph: &Graph,
    params: &ParamVector,
    inputs: &[Tensor],
) -> Result<ParamVector, AutodiffError> {
    let mut g = rebind(graph, params, inputs)?;
    let loss = scalar_output(&g)?;
    let leaves = g.params().to_vec();
    let grads = g.grad(loss, &leaves)?;
    let tensors: Vec<Tensor> = grads.iter().map(|&n| g.value(n).clone()).collect();
    ParamVector::from_tensors(params.layout().clone(), &tensors)
}

/// Total derivative of an outer loss that reaches the parameters both
/// directly and through embedded gradient nodes (for example an adapted
/// parameter set `θ − α∇L(θ)`). Every path is differentiated exactly;
/// a primitive without the needed derivative order is reported as
/// [`AutodiffError::Unsupported`].
pub fn second_order_gradient(
    outer_loss_graph: &Graph,
    params: &ParamVector,
) -> Result<ParamVector, AutodiffError> {
    let inputs: Vec<Tensor> = outer_loss_graph
        .inputs()
        .iter()
        .map(|&i| outer_loss_graph.value(i).clone())
        .collect();
    gradient(outer_loss_graph, params, &inputs)
}

fn scalar_output(g: &Graph) -> Result<NodeId, AutodiffError> {
    match g.outputs() {
        [y] if g.value(*y).is_scalar() => Ok(*y),
        [y] => Err(AutodiffError::NonScalarOutput {
            node: y.index(),
            shape: g.shape(*y).to_vec(),
        }),
        outs => Err(AutodiffError::LeafCount {
            kind: "output",
            expected: 1,
            got: outs.len(),
        }),
    }
}

/// A copy of `graph` whose recorded values are recomputed for new leaves.
fn rebind(graph: &Graph, params: &ParamVector, inputs: &[Tensor]) -> Result<Graph, AutodiffError> {
    let values = graph.evaluate(&params.tensors(), inputs)?;
    let mut g = graph.clone();
    for (node, v) in g.nodes.iter_mut().zip(values) {
        node.value = v;
    }
    Ok(g)
}
