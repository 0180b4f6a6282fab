//! Mask-based two-speaker separator (encoder → dilated TCN separator →
//! sigmoid masks → transposed-convolution decoder) and the uPIT loss.
//!
//! The model is expressed as [`Graph`] construction so the same code path
//! serves plain evaluation, gradients and gradients of gradients.

mod checkpoint;
mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ConvSpec, Graph, Layout, NodeId, ParamVector, Tensor};
use crate::dsp::{DspError, Waveform};

pub use checkpoint::{config_hash, Checkpoint, CheckpointError};
pub use loss::{graph_si_snr, upit_loss, upit_loss_value, Permutation, UpitLoss};

/// Number of sources separated by this model.
pub const NUM_SOURCES: usize = 2;

const GLN_EPS: f64 = 1e-8;
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("invalid separator config: {0}")]
    Config(String),
    #[error("input of {samples} samples is shorter than the encoder kernel ({kernel})")]
    TooShort { samples: usize, kernel: usize },
    #[error("parameter layout does not match the separator config")]
    LayoutMismatch,
}

/// Separator hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorConfig {
    /// H: encoder output channels
    pub enc_channels: usize,
    /// L: encoder kernel size
    pub enc_kernel: usize,
    pub enc_stride: usize,
    /// B
    pub bottleneck_channels: usize,
    /// Hc: channels inside each dilated block
    pub conv_channels: usize,
    /// P: depthwise kernel size
    pub kernel: usize,
    /// X
    pub blocks_per_stack: usize,
    /// R
    pub stacks: usize,
    pub num_sources: usize,
    /// Global layer normalization inside the blocks.
    pub global_norm: bool,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            enc_channels: 64,
            enc_kernel: 16,
            enc_stride: 8,
            bottleneck_channels: 32,
            conv_channels: 64,
            kernel: 3,
            blocks_per_stack: 4,
            stacks: 2,
            num_sources: NUM_SOURCES,
            global_norm: true,
        }
    }
}

impl SeparatorConfig {
    /// Small configuration used for tests and desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            enc_channels: 16,
            enc_kernel: 16,
            enc_stride: 8,
            bottleneck_channels: 8,
            conv_channels: 16,
            kernel: 3,
            blocks_per_stack: 3,
            stacks: 1,
            num_sources: NUM_SOURCES,
            global_norm: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("enc_channels", self.enc_channels),
            ("enc_kernel", self.enc_kernel),
            ("enc_stride", self.enc_stride),
            ("bottleneck_channels", self.bottleneck_channels),
            ("conv_channels", self.conv_channels),
            ("kernel", self.kernel),
            ("blocks_per_stack", self.blocks_per_stack),
            ("stacks", self.stacks),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.num_sources != NUM_SOURCES {
            return Err(ModelError::Config(format!(
                "num_sources must be {NUM_SOURCES}, got {}",
                self.num_sources
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::Config("kernel must be odd for length-preserving blocks".into()));
        }
        Ok(())
    }

    /// Encoder frames for an input of `samples` samples.
    pub fn frames(&self, samples: usize) -> Option<usize> {
        ConvSpec::strided(self.enc_stride).output_len(samples, self.enc_kernel)
    }

    /// Receptive field of the dilated stack, in encoder frames.
    pub fn receptive_field(&self) -> usize {
        let per_stack: usize = (0..self.blocks_per_stack).map(|x| 1usize << x).sum();
        1 + (self.kernel - 1) * self.stacks * per_stack
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.stacks).flat_map(move |r| (0..self.blocks_per_stack).map(move |x| (r, x)))
    }

    /// Parameter layout together with the index of every named tensor.
    pub fn layout(&self) -> (Layout, LayerIndex) {
        let (h, b, hc, p) = (
            self.enc_channels,
            self.bottleneck_channels,
            self.conv_channels,
            self.kernel,
        );
        let mut l = Layout::new();
        let encoder = l.push("encoder.weight", vec![h, 1, self.enc_kernel]);
        let bottleneck_w = l.push("bottleneck.weight", vec![b, h, 1]);
        let bottleneck_b = l.push("bottleneck.bias", vec![b]);
        let n_blocks = self.stacks * self.blocks_per_stack;
        let mut blocks = Vec::with_capacity(n_blocks);
        for (i, (r, x)) in self.blocks().enumerate() {
            let name = |part: &str| format!("tcn.{r}.{x}.{part}");
            let last = i + 1 == n_blocks;
            blocks.push(BlockIndex {
                dilation: 1 << x,
                in_w: l.push(name("in.weight"), vec![hc, b, 1]),
                in_b: l.push(name("in.bias"), vec![hc]),
                prelu1: l.push(name("prelu1"), vec![1]),
                norm1: (l.push(name("norm1.gain"), vec![hc]), l.push(name("norm1.bias"), vec![hc])),
                dw_w: l.push(name("depthwise.weight"), vec![hc, 1, p]),
                dw_b: l.push(name("depthwise.bias"), vec![hc]),
                prelu2: l.push(name("prelu2"), vec![1]),
                norm2: (l.push(name("norm2.gain"), vec![hc]), l.push(name("norm2.bias"), vec![hc])),
                // the last block's residual output is never consumed
                residual: (!last).then(|| {
                    (
                        l.push(name("residual.weight"), vec![b, hc, 1]),
                        l.push(name("residual.bias"), vec![b]),
                    )
                }),
                skip: (l.push(name("skip.weight"), vec![b, hc, 1]), l.push(name("skip.bias"), vec![b])),
            });
        }
        let out_prelu = l.push("output.prelu", vec![1]);
        let masks = (0..self.num_sources)
            .map(|c| {
                (
                    l.push(format!("mask.{c}.weight"), vec![h, b, 1]),
                    l.push(format!("mask.{c}.bias"), vec![h]),
                )
            })
            .collect();
        let decoder = l.push("decoder.weight", vec![h, 1, self.enc_kernel]);
        (
            l,
            LayerIndex {
                encoder,
                bottleneck: (bottleneck_w, bottleneck_b),
                blocks,
                out_prelu,
                masks,
                decoder,
            },
        )
    }

    /// Seeded initialization: weights and biases uniform in ±sqrt(1/fan_in),
    /// normalization gains 1 and biases 0, rectifier slopes 0.25.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let (layout, _) = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layout.dim());
        for e in layout.entries() {
            let n = e.len();
            if e.name.ends_with("prelu1") || e.name.ends_with("prelu2") || e.name.ends_with(".prelu") {
                values.extend(std::iter::repeat_n(PRELU_INIT, n));
            } else if e.name.contains(".norm") && e.name.ends_with(".gain") {
                values.extend(std::iter::repeat_n(1.0, n));
            } else if e.name.contains(".norm") && e.name.ends_with(".bias") {
                values.extend(std::iter::repeat_n(0.0, n));
            } else {
                let fan_in = self.fan_in(&e.name, &e.shape);
                let bound = (1.0 / fan_in as f64).sqrt();
                values.extend((0..n).map(|_| rng.random_range(-bound..bound)));
            }
        }
        ParamVector::new(layout, values).expect("layout built from config")
    }

    fn fan_in(&self, name: &str, shape: &[usize]) -> usize {
        if name.ends_with(".weight") {
            shape[1] * shape[2]
        } else if name == "bottleneck.bias" {
            self.enc_channels
        } else if name.starts_with("mask.") {
            self.bottleneck_channels
        } else if name.ends_with("in.bias") {
            self.bottleneck_channels
        } else if name.ends_with("depthwise.bias") {
            self.kernel
        } else {
            // residual / skip biases
            self.conv_channels
        }
    }
}

/// Positions of each tensor in the layout built by [`SeparatorConfig::layout`].
#[derive(Debug, Clone)]
pub struct LayerIndex {
    pub encoder: usize,
    pub bottleneck: (usize, usize),
    pub blocks: Vec<BlockIndex>,
    pub out_prelu: usize,
    pub masks: Vec<(usize, usize)>,
    pub decoder: usize,
}

#[derive(Debug, Clone)]
pub struct BlockIndex {
    pub dilation: usize,
    pub in_w: usize,
    pub in_b: usize,
    pub prelu1: usize,
    pub norm1: (usize, usize),
    pub dw_w: usize,
    pub dw_b: usize,
    pub prelu2: usize,
    pub norm2: (usize, usize),
    pub residual: Option<(usize, usize)>,
    pub skip: (usize, usize),
}

/// A separator bound to one set of parameter nodes inside a graph.
///
/// `params` are the graph nodes holding each layout entry, in layout order;
/// they may be leaves or derived nodes (such as adapted parameters).
pub struct Separator<'a> {
    config: &'a SeparatorConfig,
    index: LayerIndex,
    params: Vec<NodeId>,
}

impl<'a> Separator<'a> {
    pub fn new(config: &'a SeparatorConfig, params: Vec<NodeId>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, index) = config.layout();
        if layout.len() != params.len() {
            return Err(ModelError::LayoutMismatch);
        }
        Ok(Self {
            config,
            index,
            params,
        })
    }

    /// Bind fresh parameter leaves for `params` in `g`.
    pub fn bind(g: &mut Graph, config: &'a SeparatorConfig, params: &ParamVector) -> Result<Self, ModelError> {
        if params.layout() != &config.layout().0 {
            return Err(ModelError::LayoutMismatch);
        }
        let nodes = g.bind_params(params);
        Self::new(config, nodes)
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn p(&self, i: usize) -> NodeId {
        self.params[i]
    }

    /// `[1, T] -> [H, T']`
    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, ModelError> {
        let t = g.shape(x)[1];
        if t < self.config.enc_kernel {
            return Err(ModelError::TooShort {
                samples: t,
                kernel: self.config.enc_kernel,
            });
        }
        Ok(g.conv1d(x, self.p(self.index.encoder), ConvSpec::strided(self.config.enc_stride))?)
    }

    fn pointwise(&self, g: &mut Graph, x: NodeId, (w, b): (usize, usize)) -> Result<NodeId, ModelError> {
        let y = g.conv1d(x, self.p(w), ConvSpec::default())?;
        Ok(g.add_row(y, self.p(b))?)
    }

    fn norm(&self, g: &mut Graph, x: NodeId, (gain, bias): (usize, usize)) -> Result<NodeId, ModelError> {
        if self.config.global_norm {
            Ok(g.global_layer_norm(x, self.p(gain), self.p(bias), GLN_EPS)?)
        } else {
            Ok(x)
        }
    }

    /// Bottleneck, dilated stacks and mask head: `[H, T'] -> C × [H, T']`.
    pub fn separate_masks(&self, g: &mut Graph, x_enc: NodeId) -> Result<Vec<NodeId>, ModelError> {
        let skip_sum = self.tcn(g, x_enc)?;
        let act = g.prelu(skip_sum, self.p(self.index.out_prelu))?;
        let mut masks = Vec::with_capacity(self.config.num_sources);
        for &head in &self.index.masks {
            let logits = self.pointwise(g, act, head)?;
            masks.push(g.sigmoid(logits)?);
        }
        Ok(masks)
    }

    /// Sum of skip outputs of all dilated blocks.
    pub fn tcn(&self, g: &mut Graph, x_enc: NodeId) -> Result<NodeId, ModelError> {
        let hc = self.config.conv_channels;
        let mut x = self.pointwise(g, x_enc, self.index.bottleneck)?;
        let mut skip_sum: Option<NodeId> = None;
        for blk in &self.index.blocks {
            let h = self.pointwise(g, x, (blk.in_w, blk.in_b))?;
            let h = g.prelu(h, self.p(blk.prelu1))?;
            let h = self.norm(g, h, blk.norm1)?;
            let spec = ConvSpec::depthwise_same(hc, self.config.kernel, blk.dilation);
            let h = g.conv1d(h, self.p(blk.dw_w), spec)?;
            let h = g.add_row(h, self.p(blk.dw_b))?;
            let h = g.prelu(h, self.p(blk.prelu2))?;
            let h = self.norm(g, h, blk.norm2)?;
            let skip = self.pointwise(g, h, blk.skip)?;
            skip_sum = Some(match skip_sum {
                None => skip,
                Some(s) => g.add(s, skip)?,
            });
            if let Some(res) = blk.residual {
                let r = self.pointwise(g, h, res)?;
                x = g.add(x, r)?;
            }
        }
        Ok(skip_sum.expect("at least one block"))
    }

    /// `d_i = x_enc ⊙ m_i`
    pub fn apply_masks(&self, g: &mut Graph, x_enc: NodeId, masks: &[NodeId]) -> Result<Vec<NodeId>, ModelError> {
        masks
            .iter()
            .map(|&m| g.mul(x_enc, m).map_err(ModelError::from))
            .collect()
    }

    /// `[H, T'] -> [1, samples]` by transposed convolution (overlap-add).
    pub fn decode(&self, g: &mut Graph, d: NodeId, samples: usize) -> Result<NodeId, ModelError> {
        Ok(g.conv_transpose1d(
            d,
            self.p(self.index.decoder),
            ConvSpec::strided(self.config.enc_stride),
            samples,
        )?)
    }

    /// Full pipeline; returns one `[1, T]` estimate per source.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<[NodeId; 2], ModelError> {
        let t = g.shape(x)[1];
        let enc = self.encode(g, x)?;
        let masks = self.separate_masks(g, enc)?;
        let feats = self.apply_masks(g, enc, &masks)?;
        let a = self.decode(g, feats[0], t)?;
        let b = self.decode(g, feats[1], t)?;
        Ok([a, b])
    }
}

fn waveform_input(g: &mut Graph, x: &Waveform) -> NodeId {
    g.input(Tensor::row(x.samples.clone()))
}

/// Encoder output for `x`.
pub fn encode(x: &Waveform, params: &ParamVector, config: &SeparatorConfig) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let sep = Separator::bind(&mut g, config, params)?;
    let xi = waveform_input(&mut g, x);
    let enc = sep.encode(&mut g, xi)?;
    Ok(g.value(enc).clone())
}

/// Masks for an encoder output.
pub fn separate_masks(x_enc: &Tensor, params: &ParamVector, config: &SeparatorConfig) -> Result<Vec<Tensor>, ModelError> {
    let mut g = Graph::new();
    let sep = Separator::bind(&mut g, config, params)?;
    let e = g.input(x_enc.clone());
    let masks = sep.separate_masks(&mut g, e)?;
    Ok(masks.iter().map(|&m| g.value(m).clone()).collect())
}

/// `d_i = x_enc ⊙ m_i` for every mask.
pub fn apply_masks(x_enc: &Tensor, masks: &[Tensor]) -> Result<Vec<Tensor>, ModelError> {
    let mut g = Graph::new();
    let e = g.input(x_enc.clone());
    masks
        .iter()
        .map(|m| {
            let mi = g.input(m.clone());
            let d = g.mul(e, mi)?;
            Ok(g.value(d).clone())
        })
        .collect()
}

/// Decoder output of `samples` samples for one masked feature tensor.
pub fn decode(d: &Tensor, params: &ParamVector, config: &SeparatorConfig, samples: usize) -> Result<Waveform, ModelError> {
    let mut g = Graph::new();
    let sep = Separator::bind(&mut g, config, params)?;
    let di = g.input(d.clone());
    let y = sep.decode(&mut g, di, samples)?;
    Ok(Waveform::new(g.value(y).data().to_vec()))
}

/// Separate `x` into two estimated sources of the same length.
pub fn forward_separate(x: &Waveform, params: &ParamVector, config: &SeparatorConfig) -> Result<[Waveform; 2], ModelError> {
    let mut g = Graph::new();
    let sep = Separator::bind(&mut g, config, params)?;
    let xi = waveform_input(&mut g, x);
    let [a, b] = sep.forward(&mut g, xi)?;
    Ok([
        Waveform::new(g.value(a).data().to_vec()),
        Waveform::new(g.value(b).data().to_vec()),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_accounts_for_every_tensor() {
        let cfg = SeparatorConfig::tiny();
        let (layout, index) = cfg.layout();
        layout.validate().unwrap();
        assert_eq!(index.blocks.len(), 3);
        assert!(index.blocks[2].residual.is_none());
        assert_eq!(index.blocks.iter().map(|b| b.dilation).collect::<Vec<_>>(), vec![1, 2, 4]);
        let p = cfg.init_params(1);
        assert_eq!(p.dim(), layout.dim());
        assert_eq!(p.get("tcn.0.0.prelu1").unwrap(), &[0.25]);
        assert!(p.get("tcn.0.1.norm2.gain").unwrap().iter().all(|&v| v == 1.0));
        let bound = (1.0f64 / 16.0).sqrt();
        assert!(p.get("encoder.weight").unwrap().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn frames_and_receptive_field() {
        let cfg = SeparatorConfig::default();
        assert_eq!(cfg.frames(32_000), Some(3999));
        assert_eq!(cfg.receptive_field(), 1 + 2 * 2 * 15);
        assert_eq!(SeparatorConfig::tiny().receptive_field(), 15);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SeparatorConfig::tiny();
        cfg.num_sources = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = SeparatorConfig::tiny();
        cfg.stacks = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SeparatorConfig::tiny();
        cfg.kernel = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn too_short_input_rejected() {
        let cfg = SeparatorConfig::tiny();
        let p = cfg.init_params(0);
        let x = Waveform::new(vec![0.1; 10]);
        assert!(matches!(encode(&x, &p, &cfg), Err(ModelError::TooShort { .. })));
    }
}
