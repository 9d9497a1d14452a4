//! Toy generator and patch discriminator built on [`ConvNet`].

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::convnet::{Activation, ConvNet, ForwardOpts, ForwardOut, GraphDef, InputRef, LayerDef, NormKind};
use crate::config::{GeneratorStyle, ModelConfig};
use crate::error::{contract, Result};
use crate::nn::{self, CheckpointMeta, Module, DEVICE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Owner {
    Generator,
    Discriminator,
}

/// Pixel range convention of an image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRange {
    /// GAN networks.
    Signed,
    /// The encoder.
    Unit,
}

/// Stacks H×W×C images into an N×C×H×W tensor, mapping `[0, 1]` to the range.
pub fn images_to_tensor(images: &[&Array3<f32>], range: PixelRange) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return contract("empty image batch");
    };
    let (h, w, c) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return contract("images in a batch differ in shape");
        }
        data.extend(img.iter().copied());
    }
    let t = Tensor::from_vec(data, (images.len(), h, w, c), &DEVICE)?.permute((0, 3, 1, 2))?.contiguous()?;
    Ok(match range {
        PixelRange::Unit => t,
        PixelRange::Signed => t.affine(2.0, -1.0)?,
    })
}

/// Inverse of [`images_to_tensor`]: back to H×W×C images in `[0, 1]`.
pub fn tensor_to_images(t: &Tensor, range: PixelRange) -> Result<Vec<Array3<f32>>> {
    let t = match range {
        PixelRange::Unit => t.clone(),
        PixelRange::Signed => t.affine(0.5, 0.5)?,
    };
    let t = t.permute((0, 2, 3, 1))?.contiguous()?.to_dtype(DType::F32)?;
    let (n, h, w, c) = t.dims4()?;
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..n)
        .map(|i| {
            Array3::from_shape_vec((h, w, c), flat[i * h * w * c..(i + 1) * h * w * c].to_vec())
                .expect("shape matches")
        })
        .collect())
}

pub(crate) fn check_range(x: &Tensor, lo: f64, hi: f64, what: &str) -> Result<()> {
    let v = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().any(|p| !p.is_finite() || *p < lo - 1e-6 || *p > hi + 1e-6) {
        return contract(format!("{what} input must be finite and within [{lo}, {hi}]"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub style: GeneratorStyle,
    pub base_width: usize,
    pub depth: usize,
    pub n_blocks: usize,
    pub dropout_rate: f64,
    pub image_size: usize,
    pub channels: usize,
}

impl GeneratorConfig {
    pub fn from_model(m: &ModelConfig, image_size: usize) -> Self {
        Self {
            style: m.style,
            base_width: m.base_width,
            depth: m.depth,
            n_blocks: m.n_blocks,
            dropout_rate: m.dropout_rate,
            image_size,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    pub depth: usize,
    pub image_size: usize,
    /// Channels of each of the two images; the net sees twice as many.
    pub channels: usize,
}

impl DiscriminatorConfig {
    pub fn from_model(m: &ModelConfig, image_size: usize) -> Self {
        Self { base_width: m.disc_width, depth: m.disc_depth, image_size, channels: 3 }
    }
}

/// Channel width of U-Net level `l` (level 0 is the stem).
fn unet_width(base: usize, l: usize) -> usize {
    base * (1usize << l.min(2))
}

pub fn unet_graph(c: &GeneratorConfig) -> GraphDef {
    use Activation::*;
    let w = c.base_width;
    let d = c.depth;
    let mut layers = vec![LayerDef::conv("stem", vec![InputRef::image()], w, 1).act(Leaky)];
    for l in 1..=d {
        layers.push(
            LayerDef::conv(&format!("down{l}"), vec![InputRef::layer(l - 1)], unet_width(w, l), 2)
                .norm(NormKind::Batch)
                .act(Leaky)
                .prunable(),
        );
    }
    // Decoder: up{l} upsamples the deeper activation and concatenates the skip
    // from level l-1 (the stem for l = 1).
    let mut prev = d;
    for l in (1..=d).rev() {
        let inner = l + 2 > d;
        layers.push(
            LayerDef::conv(&format!("up{l}"), vec![InputRef::layer_up(prev), InputRef::layer(l - 1)], unet_width(w, l - 1), 1)
                .norm(NormKind::Batch)
                .act(Relu)
                .dropout(inner)
                .prunable(),
        );
        prev = layers.len() - 1;
    }
    layers.push(LayerDef::conv("head", vec![InputRef::layer(prev)], c.channels, 1).act(Tanh));
    GraphDef { image_channels: c.channels, image_size: c.image_size, dropout_rate: c.dropout_rate, layers }
}

pub fn resnet_graph(c: &GeneratorConfig) -> GraphDef {
    use Activation::*;
    let w = c.base_width;
    let n = NormKind::Instance;
    let mut layers = vec![
        LayerDef::conv("stem", vec![InputRef::image()], w, 1).norm(n).act(Relu),
        LayerDef::conv("down1", vec![InputRef::layer(0)], 2 * w, 2).norm(n).act(Relu).prunable(),
        LayerDef::conv("down2", vec![InputRef::layer(1)], 4 * w, 2).norm(n).act(Relu),
    ];
    let mut trunk = 2;
    for b in 0..c.n_blocks {
        layers.push(
            LayerDef::conv(&format!("block{b}.inner"), vec![InputRef::layer(trunk)], 4 * w, 1)
                .norm(n)
                .act(Relu)
                .dropout(true)
                .prunable(),
        );
        let inner = layers.len() - 1;
        layers.push(LayerDef::conv(&format!("block{b}.outer"), vec![InputRef::layer(inner)], 4 * w, 1).norm(n).residual(trunk));
        trunk = layers.len() - 1;
    }
    layers.push(LayerDef::conv("up2", vec![InputRef::layer_up(trunk)], 2 * w, 1).norm(n).act(Relu).prunable());
    let up2 = layers.len() - 1;
    layers.push(LayerDef::conv("up1", vec![InputRef::layer_up(up2)], w, 1).norm(n).act(Relu).prunable());
    let up1 = layers.len() - 1;
    layers.push(LayerDef::conv("head", vec![InputRef::layer(up1)], c.channels, 1).act(Tanh));
    GraphDef { image_channels: c.channels, image_size: c.image_size, dropout_rate: c.dropout_rate, layers }
}

pub fn discriminator_graph(c: &DiscriminatorConfig) -> GraphDef {
    use Activation::*;
    let w = c.base_width;
    let mut layers = vec![LayerDef::conv("stem", vec![InputRef::image()], w, 1).act(Leaky)];
    for l in 1..=c.depth {
        layers.push(
            LayerDef::conv(&format!("conv{l}"), vec![InputRef::layer(l - 1)], w * (1usize << (l - 1).min(2)), 2)
                .norm(NormKind::Batch)
                .act(Leaky)
                .prunable(),
        );
    }
    layers.push(LayerDef::conv("head", vec![InputRef::layer(c.depth)], 1, 1));
    GraphDef { image_channels: 2 * c.channels, image_size: c.image_size, dropout_rate: 0.0, layers }
}

#[derive(Debug, Clone)]
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    pub net: ConvNet,
}

impl GeneratorNet {
    pub fn new(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let graph = match config.style {
            GeneratorStyle::Unet => unet_graph(&config),
            GeneratorStyle::Resnet => resnet_graph(&config),
        };
        Ok(Self { net: ConvNet::init(graph, rng)?, config })
    }

    /// Layers tapped for distillation: the two innermost decoder activations.
    pub fn kd_taps(&self) -> Vec<usize> {
        let names: Vec<String> = match self.config.style {
            GeneratorStyle::Unet => {
                let d = self.config.depth;
                (d.saturating_sub(1).max(1)..=d).rev().map(|l| format!("up{l}")).collect()
            }
            GeneratorStyle::Resnet => vec!["up2".into(), "up1".into()],
        };
        let mut taps: Vec<usize> = names
            .iter()
            .filter_map(|n| self.net.graph.layers.iter().position(|l| &l.name == n))
            .collect();
        taps.sort_unstable();
        taps.dedup();
        taps
    }

    /// `generator_forward`: x in `[-1, 1]`, output in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, dropout: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        check_range(x, -1.0, 1.0, "generator")?;
        Ok(self.net.forward(x, ForwardOpts { mask, dropout, ..Default::default() })?.output)
    }

    pub fn forward_with(&self, x: &Tensor, opts: ForwardOpts<'_>) -> Result<ForwardOut> {
        check_range(x, -1.0, 1.0, "generator")?;
        self.net.forward(x, opts)
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "generator".into(),
            config: serde_json::to_string(&(&self.config, &self.net.graph))?,
            seed,
            step,
            extra: Default::default(),
        };
        nn::save_checkpoint(path, &self.net.all_tensors(), &meta)
    }

    pub fn load(path: &Path, stage: &'static str) -> Result<(Self, CheckpointMeta)> {
        let (mut map, meta) = nn::load_checkpoint(path, stage)?;
        if meta.kind != "generator" {
            return contract(format!("{} is a {} checkpoint, not a generator", path.display(), meta.kind));
        }
        let (config, graph): (GeneratorConfig, GraphDef) = serde_json::from_str(&meta.config)?;
        let net = ConvNet::from_tensors(graph, &mut map)?;
        Ok((Self { config, net }, meta))
    }
}

impl Module for GeneratorNet {
    fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.net.named_vars()
    }

    fn named_buffers(&self) -> Vec<(String, Tensor)> {
        self.net.named_buffers()
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorNet {
    pub config: DiscriminatorConfig,
    pub net: ConvNet,
}

impl DiscriminatorNet {
    pub fn new(config: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let graph = discriminator_graph(&config);
        Ok(Self { net: ConvNet::init(graph, rng)?, config })
    }

    /// `discriminator_forward`: patch scores for channel-concatenated (x, y).
    pub fn forward(&self, x: &Tensor, y: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with(x, y, ForwardOpts { mask, ..Default::default() })?.output)
    }

    pub fn forward_with(&self, x: &Tensor, y: &Tensor, opts: ForwardOpts<'_>) -> Result<ForwardOut> {
        let xy = Tensor::cat(&[x, y], 1)?;
        self.net.forward(&xy, opts)
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "discriminator".into(),
            config: serde_json::to_string(&(&self.config, &self.net.graph))?,
            seed,
            step,
            extra: Default::default(),
        };
        nn::save_checkpoint(path, &self.net.all_tensors(), &meta)
    }

    pub fn load(path: &Path, stage: &'static str) -> Result<(Self, CheckpointMeta)> {
        let (mut map, meta) = nn::load_checkpoint(path, stage)?;
        if meta.kind != "discriminator" {
            return contract(format!("{} is a {} checkpoint, not a discriminator", path.display(), meta.kind));
        }
        let (config, graph): (DiscriminatorConfig, GraphDef) = serde_json::from_str(&meta.config)?;
        let net = ConvNet::from_tensors(graph, &mut map)?;
        Ok((Self { config, net }, meta))
    }
}

impl Module for DiscriminatorNet {
    fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.net.named_vars()
    }

    fn named_buffers(&self) -> Vec<(String, Tensor)> {
        self.net.named_buffers()
    }
}
