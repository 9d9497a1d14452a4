//! A small declarative conv-net graph with per-channel mask slots.
//!
//! Every network in this crate (both generator styles and the patch
//! discriminator) is a [`ConvNet`]: an ordered list of conv layers, each
//! reading the channel-concatenation of earlier layers (or the input image),
//! optionally upsampled. Prunable layers expose their output channels as mask
//! slots; the flat mask follows layer order, then channel order.

use std::collections::HashMap;

use candle_core::{DType, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{self, channel_moments, dropout_mask, leaky_relu, normal_tensor, Module, DEVICE};

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Batch,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Leaky,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Image,
    Layer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    pub source: Source,
    /// Nearest-neighbour ×2 upsampling before concatenation.
    pub upsample: bool,
}

impl InputRef {
    pub fn layer(i: usize) -> Self {
        Self { source: Source::Layer(i), upsample: false }
    }

    pub fn layer_up(i: usize) -> Self {
        Self { source: Source::Layer(i), upsample: true }
    }

    pub fn image() -> Self {
        Self { source: Source::Image, upsample: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDef {
    pub name: String,
    pub inputs: Vec<InputRef>,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub norm: NormKind,
    pub act: Activation,
    pub dropout: bool,
    /// Output of this layer is added after normalisation, before activation.
    pub residual: Option<usize>,
    pub prunable: bool,
}

impl LayerDef {
    pub fn conv(name: &str, inputs: Vec<InputRef>, out: usize, stride: usize) -> Self {
        Self {
            name: name.to_string(),
            inputs,
            out_channels: out,
            kernel: 3,
            stride,
            padding: 1,
            norm: NormKind::None,
            act: Activation::None,
            dropout: false,
            residual: None,
            prunable: false,
        }
    }

    pub fn norm(mut self, n: NormKind) -> Self {
        self.norm = n;
        self
    }

    pub fn act(mut self, a: Activation) -> Self {
        self.act = a;
        self
    }

    pub fn prunable(mut self) -> Self {
        self.prunable = true;
        self
    }

    pub fn dropout(mut self, on: bool) -> Self {
        self.dropout = on;
        self
    }

    pub fn residual(mut self, src: usize) -> Self {
        self.residual = Some(src);
        self
    }
}

/// Architecture of a [`ConvNet`], serialisable into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDef {
    pub image_channels: usize,
    pub image_size: usize,
    pub dropout_rate: f64,
    pub layers: Vec<LayerDef>,
}

/// Resolved shapes of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub in_size: usize,
    pub out_size: usize,
}

impl GraphDef {
    pub fn source_channels(&self, s: Source) -> usize {
        match s {
            Source::Image => self.image_channels,
            Source::Layer(j) => self.layers[j].out_channels,
        }
    }

    /// Shape inference plus structural validation.
    pub fn shapes(&self) -> Result<Vec<LayerShape>> {
        let mut out: Vec<LayerShape> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs.is_empty() {
                return contract(format!("layer {} has no inputs", l.name));
            }
            let mut size = None;
            let mut cin = 0;
            for inp in &l.inputs {
                let s = match inp.source {
                    Source::Image => self.image_size,
                    Source::Layer(j) if j < i => out[j].out_size,
                    Source::Layer(j) => return contract(format!("layer {} reads later layer {j}", l.name)),
                };
                let s = if inp.upsample { 2 * s } else { s };
                if size.is_some_and(|prev| prev != s) {
                    return contract(format!("layer {} concatenates mismatched sizes", l.name));
                }
                size = Some(s);
                cin += self.source_channels(inp.source);
            }
            let in_size = size.expect("non-empty inputs");
            if in_size + 2 * l.padding < l.kernel {
                return contract(format!("layer {} input too small", l.name));
            }
            let out_size = (in_size + 2 * l.padding - l.kernel) / l.stride + 1;
            if let Some(r) = l.residual {
                if r >= i || out[r].out_size != out_size || self.layers[r].out_channels != l.out_channels {
                    return contract(format!("layer {} has an incompatible residual", l.name));
                }
                if self.layers[r].prunable || l.prunable {
                    return contract(format!("residual layer {} must not be prunable", l.name));
                }
            }
            if l.out_channels == 0 {
                return contract(format!("layer {} has no channels", l.name));
            }
            out.push(LayerShape { in_channels: cin, in_size, out_size });
        }
        Ok(out)
    }

    /// (layer index, unit offset, channels) of every prunable layer.
    pub fn mask_slots(&self) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.prunable)
            .map(|(i, l)| {
                let slot = (i, off, l.out_channels);
                off += l.out_channels;
                slot
            })
            .collect()
    }

    pub fn num_units(&self) -> usize {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.out_channels).sum()
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
}

/// Per-layer record of a forward pass, used by independent MAC counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvTrace {
    pub layer: usize,
    /// (out, in, k_h, k_w)
    pub weight_dims: (usize, usize, usize, usize),
    /// (N, C, H, W)
    pub output_dims: (usize, usize, usize, usize),
}

/// Options of one forward pass.
pub struct ForwardOpts<'a> {
    /// Flat architecture mask (length = number of units), soft or hard.
    pub mask: Option<&'a Tensor>,
    /// Normalise with batch statistics (training) instead of running ones.
    pub train_norm: bool,
    /// When present, dropout layers draw ξ from this stream.
    pub dropout: Option<&'a mut ChaCha8Rng>,
    /// Layers whose (post-mask) activations are returned as taps.
    pub taps: &'a [usize],
    pub trace: bool,
    /// Treat weights as constants (no gradients are accumulated for them).
    pub frozen: bool,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        Self { mask: None, train_norm: false, dropout: None, taps: &[], trace: false, frozen: false }
    }
}

#[derive(Debug)]
pub struct ForwardOut {
    pub output: Tensor,
    pub taps: Vec<Tensor>,
    /// (layer, batch mean, batch variance) for batch-norm layers run in training mode.
    pub batch_stats: Vec<(usize, Tensor, Tensor)>,
    pub trace: Vec<ConvTrace>,
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    pub graph: GraphDef,
    pub params: Vec<LayerParams>,
}

impl ConvNet {
    pub fn init(graph: GraphDef, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shapes = graph.shapes()?;
        let params = graph
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| {
                let w = normal_tensor(rng, &[l.out_channels, s.in_channels, l.kernel, l.kernel], 0.0, 0.02)?;
                let b = Tensor::zeros(l.out_channels, DType::F32, &DEVICE)?;
                let norm = l.norm != NormKind::None;
                let gamma = if norm { Some(Var::from_tensor(&normal_tensor(rng, &[l.out_channels], 1.0, 0.02)?)?) } else { None };
                let beta = if norm { Some(Var::zeros(l.out_channels, DType::F32, &DEVICE)?) } else { None };
                let bn = l.norm == NormKind::Batch;
                Ok(LayerParams {
                    weight: Var::from_tensor(&w)?,
                    bias: Var::from_tensor(&b)?,
                    gamma,
                    beta,
                    running_mean: if bn { Some(Tensor::zeros(l.out_channels, DType::F32, &DEVICE)?) } else { None },
                    running_var: if bn { Some(Tensor::ones(l.out_channels, DType::F32, &DEVICE)?) } else { None },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { graph, params })
    }

    pub fn num_units(&self) -> usize {
        self.graph.num_units()
    }

    pub fn output_layer(&self) -> usize {
        self.graph.layers.len() - 1
    }

    pub fn forward(&self, x: &Tensor, mut opts: ForwardOpts<'_>) -> Result<ForwardOut> {
        let g = &self.graph;
        let (_, c, h, w) = x.dims4()?;
        if c != g.image_channels || h != g.image_size || w != g.image_size {
            return contract(format!(
                "input is {c}x{h}x{w}, network expects {}x{}x{}",
                g.image_channels, g.image_size, g.image_size
            ));
        }
        let slots: HashMap<usize, (usize, usize)> =
            g.mask_slots().into_iter().map(|(l, off, n)| (l, (off, n))).collect();
        if let Some(m) = opts.mask {
            if m.dims() != [g.num_units()] {
                return contract(format!("mask has shape {:?}, expected [{}]", m.dims(), g.num_units()));
            }
        }

        let frozen = opts.frozen;
        let val = |v: &Var| if frozen { v.as_tensor().detach() } else { v.as_tensor().clone() };
        let mut acts: Vec<Tensor> = Vec::with_capacity(g.layers.len());
        let mut out = ForwardOut { output: x.clone(), taps: Vec::new(), batch_stats: Vec::new(), trace: Vec::new() };
        for (i, (l, p)) in g.layers.iter().zip(&self.params).enumerate() {
            let parts = l
                .inputs
                .iter()
                .map(|inp| {
                    let t = match inp.source {
                        Source::Image => x.clone(),
                        Source::Layer(j) => acts[j].clone(),
                    };
                    if inp.upsample {
                        let (_, _, h, w) = t.dims4()?;
                        Ok(t.upsample_nearest2d(2 * h, 2 * w)?)
                    } else {
                        Ok(t)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let input = if parts.len() == 1 { parts[0].clone() } else { Tensor::cat(&parts, 1)? };
            let mut y = input.conv2d(&val(&p.weight), l.padding, l.stride, 1, 1)?;
            let cout = l.out_channels;
            y = y.broadcast_add(&val(&p.bias).reshape((1, cout, 1, 1))?)?;
            if opts.trace {
                out.trace.push(ConvTrace {
                    layer: i,
                    weight_dims: p.weight.as_tensor().dims4()?,
                    output_dims: y.dims4()?,
                });
            }
            y = match l.norm {
                NormKind::None => y,
                NormKind::Instance => {
                    let (mean, var) = channel_moments(&y, &[2, 3])?;
                    y.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?
                }
                NormKind::Batch => {
                    let (mean, var) = if opts.train_norm {
                        let (mean, var) = channel_moments(&y, &[0, 2, 3])?;
                        out.batch_stats.push((i, mean.flatten_all()?.detach(), var.flatten_all()?.detach()));
                        (mean, var)
                    } else {
                        let rm = p.running_mean.as_ref().expect("batch norm has running stats");
                        let rv = p.running_var.as_ref().expect("batch norm has running stats");
                        (rm.reshape((1, cout, 1, 1))?, rv.reshape((1, cout, 1, 1))?)
                    };
                    y.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?
                }
            };
            if let (Some(gm), Some(bt)) = (&p.gamma, &p.beta) {
                y = y
                    .broadcast_mul(&val(gm).reshape((1, cout, 1, 1))?)?
                    .broadcast_add(&val(bt).reshape((1, cout, 1, 1))?)?;
            }
            if let Some(r) = l.residual {
                y = (y + &acts[r])?;
            }
            y = match l.act {
                Activation::None => y,
                Activation::Relu => y.relu()?,
                Activation::Leaky => leaky_relu(&y, LEAKY_SLOPE)?,
                Activation::Tanh => y.tanh()?,
            };
            if l.dropout && g.dropout_rate > 0.0 {
                if let Some(rng) = opts.dropout.as_deref_mut() {
                    let m = dropout_mask(rng, y.dims(), g.dropout_rate)?;
                    y = (y * m)?;
                }
            }
            if let (Some(mask), Some(&(off, n))) = (opts.mask, slots.get(&i)) {
                let m = mask.narrow(0, off, n)?.to_dtype(y.dtype())?.reshape((1, n, 1, 1))?;
                y = y.broadcast_mul(&m)?;
            }
            if opts.taps.contains(&i) {
                out.taps.push(y.clone());
            }
            acts.push(y);
        }
        out.output = acts.pop().expect("network has layers");
        Ok(out)
    }

    /// Folds batch statistics from a training-mode pass into the running ones.
    pub fn update_running_stats(&mut self, stats: &[(usize, Tensor, Tensor)]) -> Result<()> {
        for (layer, mean, var) in stats {
            let p = &mut self.params[*layer];
            let (Some(rm), Some(rv)) = (p.running_mean.as_mut(), p.running_var.as_mut()) else {
                continue;
            };
            *rm = ((&*rm * (1.0 - BN_MOMENTUM))? + (mean * BN_MOMENTUM)?)?;
            *rv = ((&*rv * (1.0 - BN_MOMENTUM))? + (var * BN_MOMENTUM)?)?;
        }
        Ok(())
    }

    /// Physically removes channels: `keep[slot]` lists surviving channel
    /// indices of each prunable layer, in mask-slot order.
    pub fn extract(&self, keep: &[Vec<usize>]) -> Result<ConvNet> {
        let g = &self.graph;
        let slots = g.mask_slots();
        if keep.len() != slots.len() {
            return contract(format!("{} keep lists for {} prunable layers", keep.len(), slots.len()));
        }
        let mut kept_out: Vec<Vec<u32>> =
            g.layers.iter().map(|l| (0..l.out_channels as u32).collect()).collect();
        for ((layer, _, n), k) in slots.iter().zip(keep) {
            if k.is_empty() {
                return contract(format!("layer {} would lose every channel", g.layers[*layer].name));
            }
            if k.iter().any(|&c| c >= *n) || k.windows(2).any(|w| w[0] >= w[1]) {
                return contract(format!("invalid keep list for layer {}", g.layers[*layer].name));
            }
            kept_out[*layer] = k.iter().map(|&c| c as u32).collect();
        }

        let mut layers = Vec::with_capacity(g.layers.len());
        let mut params = Vec::with_capacity(g.layers.len());
        for (i, (l, p)) in g.layers.iter().zip(&self.params).enumerate() {
            let mut kept_in: Vec<u32> = Vec::new();
            let mut base = 0u32;
            for inp in &l.inputs {
                match inp.source {
                    Source::Image => kept_in.extend((0..g.image_channels as u32).map(|c| base + c)),
                    Source::Layer(j) => kept_in.extend(kept_out[j].iter().map(|c| base + c)),
                }
                base += g.source_channels(inp.source) as u32;
            }
            let out_idx = Tensor::new(kept_out[i].as_slice(), &DEVICE)?;
            let in_idx = Tensor::new(kept_in.as_slice(), &DEVICE)?;
            let sel = |t: &Tensor| -> Result<Tensor> { Ok(t.index_select(&out_idx, 0)?) };
            let w = p.weight.as_tensor().index_select(&out_idx, 0)?.index_select(&in_idx, 1)?;
            params.push(LayerParams {
                weight: Var::from_tensor(&w)?,
                bias: Var::from_tensor(&sel(p.bias.as_tensor())?)?,
                gamma: p.gamma.as_ref().map(|v| sel(v.as_tensor()).and_then(|t| Ok(Var::from_tensor(&t)?))).transpose()?,
                beta: p.beta.as_ref().map(|v| sel(v.as_tensor()).and_then(|t| Ok(Var::from_tensor(&t)?))).transpose()?,
                running_mean: p.running_mean.as_ref().map(sel).transpose()?,
                running_var: p.running_var.as_ref().map(sel).transpose()?,
            });
            let mut def = l.clone();
            def.out_channels = kept_out[i].len();
            layers.push(def);
        }
        let graph = GraphDef { layers, ..g.clone() };
        graph.shapes()?;
        Ok(ConvNet { graph, params })
    }

    /// Replaces every parameter and buffer from a name → tensor map.
    pub fn load_tensors(&mut self, map: &mut HashMap<String, Tensor>) -> Result<()> {
        for (l, p) in self.graph.layers.iter().zip(self.params.iter_mut()) {
            let mut load = |suffix: &str, expected: &[usize]| -> Result<Tensor> {
                let t = nn::take(map, &format!("{}.{suffix}", l.name))?;
                if t.dims() != expected {
                    return contract(format!("{}.{suffix} has shape {:?}, expected {expected:?}", l.name, t.dims()));
                }
                Ok(t)
            };
            p.weight = Var::from_tensor(&load("weight", p.weight.dims())?)?;
            p.bias = Var::from_tensor(&load("bias", p.bias.dims())?)?;
            if let Some(gm) = &mut p.gamma {
                *gm = Var::from_tensor(&load("gamma", gm.dims())?)?;
            }
            if let Some(bt) = &mut p.beta {
                *bt = Var::from_tensor(&load("beta", bt.dims())?)?;
            }
            if let Some(rm) = &mut p.running_mean {
                *rm = load("running_mean", rm.dims())?;
            }
            if let Some(rv) = &mut p.running_var {
                *rv = load("running_var", rv.dims())?;
            }
        }
        Ok(())
    }

    pub fn from_tensors(graph: GraphDef, map: &mut HashMap<String, Tensor>) -> Result<Self> {
        let mut rng = crate::util::rng_for(0, "placeholder");
        let mut net = ConvNet::init(graph, &mut rng)?;
        net.load_tensors(map)?;
        Ok(net)
    }

    pub fn all_tensors(&self) -> Vec<(String, Tensor)> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .chain(self.named_buffers())
            .collect()
    }
}

impl Module for ConvNet {
    fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (l, p) in self.graph.layers.iter().zip(&self.params) {
            out.push((format!("{}.weight", l.name), p.weight.clone()));
            out.push((format!("{}.bias", l.name), p.bias.clone()));
            if let Some(g) = &p.gamma {
                out.push((format!("{}.gamma", l.name), g.clone()));
            }
            if let Some(b) = &p.beta {
                out.push((format!("{}.beta", l.name), b.clone()));
            }
        }
        out
    }

    fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, p) in self.graph.layers.iter().zip(&self.params) {
            if let Some(m) = &p.running_mean {
                out.push((format!("{}.running_mean", l.name), m.clone()));
            }
            if let Some(v) = &p.running_var {
                out.push((format!("{}.running_var", l.name), v.clone()));
            }
        }
        out
    }
}

pub(crate) fn missing_slot(name: &str) -> Error {
    Error::Contract(format!("network `{name}` exposes no mask slots"))
}
