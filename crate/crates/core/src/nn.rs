//! Small neural-network toolkit on top of candle's autograd: parameter
//! bookkeeping, initialisers, activations, Adam and checkpoint files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use safetensors::tensor::TensorView;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::util::sha256_hex;

pub const DEVICE: Device = Device::Cpu;

/// Anything with named trainable variables and named non-trainable buffers.
pub trait Module {
    fn named_vars(&self) -> Vec<(String, Var)>;

    fn named_buffers(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    /// SHA-256 over every variable and buffer, in name order.
    fn weight_digest(&self) -> Result<String> {
        let mut bytes = Vec::new();
        let mut all: Vec<(String, Tensor)> = self
            .named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .chain(self.named_buffers())
            .collect();
        all.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, t) in all {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(sha256_hex(&bytes))
    }

    /// Deep copies of every variable, for before/after comparisons.
    fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?.detach())))
            .collect()
    }

    fn num_params(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (mean + std * z) as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

/// Inverted-dropout mask of the given shape with keep-probability `1 - rate`.
pub fn dropout_mask(rng: &mut ChaCha8Rng, shape: &[usize], rate: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let scale = (1.0 / keep) as f32;
    let data: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

/// Numerically safe logistic function (differentiable through `tanh`).
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Per-channel mean and biased variance over `dims` of an NCHW tensor.
pub fn channel_moments(x: &Tensor, dims: &[usize]) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim(dims)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(dims)?;
    Ok((mean, var))
}

/// Row-wise L2 norms of a 2-D weight: shape (rows, 1).
pub fn row_norms(w: &Tensor) -> Result<Tensor> {
    Ok(w.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)
}

pub fn is_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient (coupled weight decay).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

struct AdamSlot {
    var: Var,
    m: Tensor,
    v: Tensor,
    t: i32,
}

/// Adam with coupled weight decay; parameters without a gradient are skipped.
pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok(AdamSlot { var, m, v, t: 0 })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, slots })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let c = self.cfg;
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else { continue };
            let g = g.detach();
            let theta = slot.var.as_tensor().detach();
            let g = if c.weight_decay != 0.0 { (g + (&theta * c.weight_decay)?)? } else { g };
            slot.t += 1;
            slot.m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            slot.v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let mhat = (&slot.m / (1.0 - c.beta1.powi(slot.t)))?;
            let vhat = (&slot.v / (1.0 - c.beta2.powi(slot.t)))?;
            let update = (mhat / (vhat.sqrt()? + c.eps)?)?;
            slot.var.set(&(theta - (update * c.lr)?)?)?;
        }
        Ok(())
    }

    /// Backpropagates `loss` and applies one step.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Self-describing checkpoint metadata stored in the safetensors header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    /// JSON-encoded architecture / model config.
    pub config: String,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)], meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let data: Vec<u8> = t
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            Ok((name.clone(), t.dims().to_vec(), data))
        })
        .collect::<Result<_>>()?;
    let views = owned
        .iter()
        .map(|(n, shape, data)| {
            let view = TensorView::new(safetensors::Dtype::F32, shape.clone(), data)?;
            Ok((n.clone(), view))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut header = HashMap::new();
    header.insert("meta".to_string(), serde_json::to_string(meta)?);
    safetensors::serialize_to_file(views, Some(header), path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, stage: &'static str) -> Result<(HashMap<String, Tensor>, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), stage });
    }
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("meta"))
        .ok_or_else(|| Error::Data(format!("{} has no checkpoint metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    let st = safetensors::SafeTensors::deserialize(&bytes)?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F32 {
            return contract(format!("tensor {name} is not f32"));
        }
        let vals: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::from_vec(vals, view.shape(), &DEVICE)?);
    }
    Ok((out, meta))
}

pub(crate) fn take(map: &mut HashMap<String, Tensor>, name: &str) -> Result<Tensor> {
    map.remove(name)
        .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))
}
