#![allow(dead_code)]

use metasep::autodiff::{ConvSpec, Graph, NodeId, Tensor};
use metasep::gradcheck::{central_difference, mixed_error, relative_error, FD_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub leaves: Vec<Tensor>,
    pub build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks stay out of the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn ct(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..4), rng.random_range(6..14))
}

fn unary(name: &'static str, x: Tensor, f: fn(&mut Graph, NodeId) -> NodeId) -> PrimitiveCase {
    PrimitiveCase {
        name,
        leaves: vec![x],
        build: Box::new(move |g, l| f(g, l[0])),
    }
}

fn binary(
    name: &'static str,
    a: Tensor,
    b: Tensor,
    f: fn(&mut Graph, NodeId, NodeId) -> NodeId,
) -> PrimitiveCase {
    PrimitiveCase {
        name,
        leaves: vec![a, b],
        build: Box::new(move |g, l| f(g, l[0], l[1])),
    }
}

fn random_conv_spec(rng: &mut ChaCha8Rng, c_in: usize) -> (ConvSpec, usize, usize) {
    let groups = if c_in > 1 && rng.random_bool(0.5) { c_in } else { 1 };
    let c_out = groups * rng.random_range(1..3);
    let spec = ConvSpec {
        stride: rng.random_range(1..4),
        dilation: rng.random_range(1..3),
        padding: rng.random_range(0..3),
        groups,
    };
    let kernel = rng.random_range(1..4);
    (spec, c_out, kernel)
}

/// One randomly shaped case per differentiable primitive (and the
/// composites the model is built from).
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases = Vec::new();

    let (c, t) = ct(rng);
    let s = [c, t];
    cases.push(binary("add", uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0), |g, a, b| g.add(a, b).unwrap()));
    cases.push(binary("sub", uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0), |g, a, b| g.sub(a, b).unwrap()));
    cases.push(binary("mul", uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0), |g, a, b| g.mul(a, b).unwrap()));
    cases.push(unary("neg", uniform(rng, &s, -1.0, 1.0), |g, a| g.neg(a).unwrap()));
    cases.push(unary("scale", uniform(rng, &s, -1.0, 1.0), |g, a| g.scale(a, -1.7).unwrap()));
    cases.push(unary("add_const", uniform(rng, &s, -1.0, 1.0), |g, a| g.add_const(a, 0.3).unwrap()));
    cases.push(binary("mul_scalar", uniform(rng, &s, -1.0, 1.0), uniform(rng, &[1], -2.0, 2.0), |g, a, b| g.mul_scalar(a, b).unwrap()));
    cases.push(unary("sum", uniform(rng, &s, -1.0, 1.0), |g, a| g.sum(a).unwrap()));
    cases.push(unary("mean", uniform(rng, &s, -1.0, 1.0), |g, a| g.mean(a).unwrap()));
    cases.push(unary("expand", uniform(rng, &[1], -1.0, 1.0), |g, a| g.expand(a, &[3, 5]).unwrap()));
    cases.push(unary("row_sum", uniform(rng, &s, -1.0, 1.0), |g, a| g.row_sum(a).unwrap()));
    cases.push(unary("row_broadcast", uniform(rng, &[c], -1.0, 1.0), |g, a| g.row_broadcast(a, 7).unwrap()));
    cases.push(binary("add_row", uniform(rng, &s, -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0), |g, a, b| g.add_row(a, b).unwrap()));
    cases.push(binary("mul_row", uniform(rng, &s, -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0), |g, a, b| g.mul_row(a, b).unwrap()));
    cases.push(binary("dot", uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0), |g, a, b| g.dot(a, b).unwrap()));
    cases.push(unary("sq_norm", uniform(rng, &s, -1.0, 1.0), |g, a| g.sq_norm(a).unwrap()));
    cases.push(unary("sigmoid", uniform(rng, &s, -4.0, 4.0), |g, a| g.sigmoid(a).unwrap()));
    cases.push(unary("relu", away_from_zero(rng, &s), |g, a| g.relu(a).unwrap()));
    cases.push(unary("recip", uniform(rng, &s, 0.5, 2.0), |g, a| g.recip(a).unwrap()));
    cases.push(unary("sqrt", uniform(rng, &s, 0.5, 2.0), |g, a| g.sqrt(a).unwrap()));
    cases.push(unary("log10", uniform(rng, &s, 0.5, 2.0), |g, a| g.log10(a).unwrap()));
    {
        let a = uniform(rng, &s, -1.0, 1.0);
        let gap = away_from_zero(rng, &s);
        let b = Tensor::new(s.to_vec(), a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect()).unwrap();
        cases.push(binary("min", a.clone(), b.clone(), |g, a, b| g.min(a, b).unwrap()));
        cases.push(binary("max", a, b, |g, a, b| g.max(a, b).unwrap()));
    }
    cases.push(binary("prelu", away_from_zero(rng, &s), uniform(rng, &[1], 0.05, 0.5), |g, a, b| g.prelu(a, b).unwrap()));
    {
        let x = uniform(rng, &s, -1.0, 1.0);
        let gamma = uniform(rng, &[c], 0.5, 1.5);
        let beta = uniform(rng, &[c], -0.5, 0.5);
        cases.push(PrimitiveCase {
            name: "global_layer_norm",
            leaves: vec![x, gamma, beta],
            build: Box::new(|g, l| g.global_layer_norm(l[0], l[1], l[2], 1e-8).unwrap()),
        });
    }
    {
        let c_in = rng.random_range(1..4);
        let (spec, c_out, kernel) = random_conv_spec(rng, c_in);
        let t_in = rng.random_range(kernel * 2 + 4..20);
        let t_out = spec.output_len(t_in, kernel).unwrap();
        let x = uniform(rng, &[c_in, t_in], -1.0, 1.0);
        let w = uniform(rng, &[c_out, c_in / spec.groups, kernel], -1.0, 1.0);
        let gy = uniform(rng, &[c_out, t_out], -1.0, 1.0);
        cases.push(PrimitiveCase {
            name: "conv1d",
            leaves: vec![x.clone(), w.clone()],
            build: Box::new(move |g, l| g.conv1d(l[0], l[1], spec).unwrap()),
        });
        cases.push(PrimitiveCase {
            name: "conv_transpose1d",
            leaves: vec![gy.clone(), w],
            build: Box::new(move |g, l| g.conv_transpose1d(l[0], l[1], spec, t_in).unwrap()),
        });
        cases.push(PrimitiveCase {
            name: "conv_weight_grad",
            leaves: vec![x, gy],
            build: Box::new(move |g, l| g.conv_weight_grad(l[0], l[1], spec, kernel).unwrap()),
        });
    }
    cases
}

/// Reduce any output to a scalar with a fixed random projection.
pub fn project_to_scalar(g: &mut Graph, out: NodeId, seed: u64) -> NodeId {
    if g.value(out).is_scalar() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(out).to_vec();
    let r = uniform(&mut rng, &shape, -1.0, 1.0);
    let r = g.constant(r);
    g.dot(out, r).unwrap()
}

fn split(flat: &[f64], like: &[Tensor]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let v = flat[off..off + t.len()].to_vec();
            off += t.len();
            Tensor::new(t.shape().to_vec(), v).unwrap()
        })
        .collect()
}

/// Build a graph for `case`, returning it with the scalar loss and leaves.
pub fn build_case(case: &PrimitiveCase, seed: u64) -> (Graph, NodeId, Vec<NodeId>) {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = case.leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &leaves);
    let loss = project_to_scalar(&mut g, out, seed);
    (g, loss, leaves)
}

/// Relative error of the analytic first-order gradient against central differences.
pub fn first_order_error(case: &PrimitiveCase, seed: u64) -> f64 {
    let (mut g, loss, leaves) = build_case(case, seed);
    let grads = g.grad(loss, &leaves).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|&n| g.value(n).data().to_vec()).collect();
    let flat: Vec<f64> = case.leaves.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = central_difference(
        |x| g.evaluate(&split(x, &case.leaves), &[]).unwrap()[loss.index()].item(),
        &flat,
        FD_STEP,
    );
    relative_error(&analytic, &numeric)
}

/// Relative error of a second-order product: the gradient of `<∇f, v>`
/// (built by differentiating the gradient nodes) against central
/// differences of `<∇f, v>` replayed through the graph.
pub fn second_order_error(case: &PrimitiveCase, seed: u64) -> f64 {
    let (mut g, loss, leaves) = build_case(case, seed);
    let grads = g.grad(loss, &leaves).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    let mut acc = None;
    for &gr in &grads {
        let shape = g.shape(gr).to_vec();
        let v = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
        let d = g.dot(gr, v).unwrap();
        acc = Some(match acc {
            None => d,
            Some(prev) => g.add(prev, d).unwrap(),
        });
    }
    let h = acc.unwrap();
    let hess_v = g.grad(h, &leaves).unwrap();
    let analytic: Vec<f64> = hess_v.iter().flat_map(|&n| g.value(n).data().to_vec()).collect();
    let flat: Vec<f64> = case.leaves.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = central_difference(
        |x| g.evaluate(&split(x, &case.leaves), &[]).unwrap()[h.index()].item(),
        &flat,
        FD_STEP,
    );
    mixed_error(&analytic, &numeric)
}

/// Smallest distance to a kink accepted for a finite-difference comparison.
pub const KINK_MARGIN: f64 = 1e-5;

/// Relative error of the uPIT-loss gradient of a freshly initialized tiny
/// separator against central differences over every parameter, or `None`
/// when the case sits within [`KINK_MARGIN`] of a rectifier kink or a
/// permutation tie.
pub fn end_to_end_error(seed: u64, samples: usize) -> Option<f64> {
    use metasep::dsp::{mix_at_snr, Waveform};
    use metasep::model::{upit_loss, Separator, SeparatorConfig};

    let cfg = SeparatorConfig::tiny();
    let p = cfg.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut wave = || Waveform::new((0..samples).map(|_| rng.random_range(-1.0..1.0)).collect());
    let pair = mix_at_snr(&wave(), &wave(), 1.5).unwrap();
    let inputs = [Tensor::row(pair.mixture.samples.clone())];
    let mut g = Graph::new();
    let sep = Separator::bind(&mut g, &cfg, &p).unwrap();
    let x = g.input(inputs[0].clone());
    let est = sep.forward(&mut g, x).unwrap();
    let loss = upit_loss(&mut g, est, &pair.sources).unwrap().loss;
    if g.kink_margin() < KINK_MARGIN {
        return None;
    }
    g.set_outputs(vec![loss]);
    let analytic = metasep::autodiff::gradient(&g, &p, &inputs).unwrap();
    let numeric = central_difference(
        |v| g.forward(&p.with_values(v.to_vec()), &inputs).unwrap()[0].item(),
        p.values(),
        FD_STEP,
    );
    Some(relative_error(analytic.values(), &numeric))
}

/// A meta task over random waveforms of `samples` samples.
pub fn random_task(seed: u64, samples: usize) -> metasep::taskgen::MetaTask {
    use metasep::dsp::{mix_at_snr, Waveform};
    use metasep::taskgen::{query_cells, MetaTask};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = |rng: &mut ChaCha8Rng| Waveform::new((0..samples).map(|_| rng.random_range(-1.0..1.0)).collect());
    let a: Vec<Waveform> = (0..3).map(|_| wave(&mut rng)).collect();
    let b: Vec<Waveform> = (0..3).map(|_| wave(&mut rng)).collect();
    let mut mixtures = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            mixtures.push(mix_at_snr(&a[i], &b[j], rng.random_range(0.0..5.0)).unwrap());
        }
    }
    let support = rng.random_range(0..9);
    MetaTask {
        accent: format!("acc{}", seed % 3),
        speakers: [format!("s{seed}a"), format!("s{seed}b")],
        segments: [[0, 1, 2], [0, 1, 2]],
        mixtures,
        support,
        query: query_cells(support),
        noise_seed: rng.random(),
    }
}

/// Relative error between the second-order meta-gradient of one task and
/// central differences of its meta-objective; `None` near a kink.
pub fn meta_fd_error(seed: u64, samples: usize, alpha: f64) -> Option<f64> {
    use metasep::par::Execution;
    use metasep::model::SeparatorConfig;
    use metasep::trainer::{inner_adapt_nodes, meta_gradient_maml, MetaObjective, SeparationObjective};

    let cfg = SeparatorConfig::tiny();
    let p = cfg.init_params(seed);
    let task = random_task(seed ^ 0xfeed, samples);
    let obj = SeparationObjective::new(&cfg);
    let mut g = Graph::new();
    let leaves = g.bind_params(&p);
    let (adapted, _) = inner_adapt_nodes(&obj, &mut g, &leaves, &task, alpha).unwrap();
    let q = obj.query_loss(&mut g, &adapted, &task).unwrap();
    if g.kink_margin() < KINK_MARGIN {
        return None;
    }
    g.set_outputs(vec![q]);
    let inputs: Vec<Tensor> = g.inputs().iter().map(|&i| g.value(i).clone()).collect();
    let analytic = meta_gradient_maml(&obj, &p, &[&task], alpha, Execution::Sequential).unwrap().grad;
    let numeric = central_difference(
        |v| g.forward(&p.with_values(v.to_vec()), &inputs).unwrap()[0].item(),
        p.values(),
        FD_STEP,
    );
    Some(relative_error(analytic.values(), &numeric))
}

/// `L_sup = a(θ−u)²`, `L_qry = b(θ−v)²` on a single scalar parameter.
pub struct Quadratic;

#[derive(Debug, Clone, Copy)]
pub struct QTask {
    pub a: f64,
    pub u: f64,
    pub b: f64,
    pub v: f64,
}

fn quad(g: &mut Graph, theta: NodeId, scale: f64, centre: f64) -> Result<NodeId, metasep::trainer::TrainError> {
    let d = g.add_const(theta, -centre)?;
    let sq = g.mul(d, d)?;
    let s = g.scale(sq, scale)?;
    Ok(g.sum(s)?)
}

impl metasep::trainer::MetaObjective for Quadratic {
    type Task = QTask;

    fn support_loss(&self, g: &mut Graph, p: &[NodeId], t: &QTask) -> Result<NodeId, metasep::trainer::TrainError> {
        quad(g, p[0], t.a, t.u)
    }

    fn query_loss(&self, g: &mut Graph, p: &[NodeId], t: &QTask) -> Result<NodeId, metasep::trainer::TrainError> {
        quad(g, p[0], t.b, t.v)
    }

    fn label(&self, t: &QTask) -> String {
        format!("{t:?}")
    }
}

pub fn scalar(theta: f64) -> metasep::autodiff::ParamVector {
    let mut l = metasep::autodiff::Layout::new();
    l.push("theta", vec![1]);
    metasep::autodiff::ParamVector::new(l, vec![theta]).unwrap()
}
