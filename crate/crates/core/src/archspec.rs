//! Prunable-unit enumeration, architecture vectors and the exact MAC model.
//!
//! Costs count multiply-accumulates of convolutions only. A conv contributes
//! `active_in · active_out · k_h · k_w · H_out · W_out`, where active counts
//! are sums of (possibly soft) mask entries of the producing layers. Inputs
//! fed by a U-Net concatenation sum the active counts of every source.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::models::convnet::{ConvNet, Source};
use crate::models::{DiscriminatorNet, GeneratorNet, Owner};
use crate::nn::DEVICE;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableUnit {
    pub layer_id: String,
    pub channel_index: usize,
    pub kernel_hw: (usize, usize),
    pub out_spatial: (usize, usize),
    pub consumers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecInput {
    /// Channels that never change (the input image or an unprunable layer).
    Fixed(usize),
    /// A prunable layer, by index into [`PrunableSpec::layers`].
    Prunable(usize),
}

/// One conv layer of the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecLayer {
    pub id: String,
    pub inputs: Vec<SpecInput>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_hw: (usize, usize),
    pub out_spatial: (usize, usize),
    pub prunable: bool,
    /// Offset of this layer's units in the global index space.
    pub unit_offset: Option<usize>,
    /// MACs at full width.
    pub full_macs: f64,
}

impl SpecLayer {
    fn depends_on_mask(&self) -> bool {
        self.prunable || self.inputs.iter().any(|i| matches!(i, SpecInput::Prunable(_)))
    }

    fn per_channel_pair(&self) -> f64 {
        (self.kernel_hw.0 * self.kernel_hw.1 * self.out_spatial.0 * self.out_spatial.1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunableSpec {
    pub owner: Owner,
    pub layers: Vec<SpecLayer>,
    pub units: Vec<PrunableUnit>,
    /// MACs of convs whose cost does not depend on any mask entry.
    pub fixed_macs: f64,
    /// Total prunable MACs: `macs_of(all-ones) - fixed_macs`.
    pub t_total: f64,
}

/// Binary mask over a model's prunable channels, in spec order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureVector {
    pub bits: Vec<u8>,
    pub owner: Owner,
}

impl ArchitectureVector {
    pub fn ones(spec: &PrunableSpec) -> Self {
        Self { bits: vec![1; spec.units.len()], owner: spec.owner }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.bits.iter().map(|&b| b as f32).collect::<Vec<_>>(), self.bits.len(), &DEVICE)?)
    }

    pub fn from_tensor(t: &Tensor, owner: Owner) -> Result<Self> {
        let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return contract("architecture vector entries must be exactly 0 or 1");
        }
        Ok(Self { bits: v.iter().map(|&x| x as u8).collect(), owner })
    }

    /// Surviving channel indices of every prunable layer.
    pub fn keep_lists(&self, spec: &PrunableSpec) -> Result<Vec<Vec<usize>>> {
        check_len(spec, self.bits.len())?;
        Ok(spec
            .prunable_layers()
            .map(|(off, n)| (0..n).filter(|&c| self.bits[off + c] == 1).collect())
            .collect())
    }

    /// Active channel count per prunable layer.
    pub fn layer_counts(&self, spec: &PrunableSpec) -> Result<Vec<(String, usize, usize)>> {
        check_len(spec, self.bits.len())?;
        Ok(spec
            .layers
            .iter()
            .filter(|l| l.prunable)
            .map(|l| {
                let off = l.unit_offset.expect("prunable layers have offsets");
                let n = l.out_channels;
                (l.id.clone(), self.bits[off..off + n].iter().map(|&b| b as usize).sum(), n)
            })
            .collect())
    }
}

/// Networks that expose mask slots.
pub trait Prunable: Sized {
    fn conv_net(&self) -> &ConvNet;
    fn owner(&self) -> Owner;
    fn with_conv_net(&self, net: ConvNet) -> Self;
}

impl Prunable for GeneratorNet {
    fn conv_net(&self) -> &ConvNet {
        &self.net
    }
    fn owner(&self) -> Owner {
        Owner::Generator
    }
    fn with_conv_net(&self, net: ConvNet) -> Self {
        Self { config: self.config.clone(), net }
    }
}

impl Prunable for DiscriminatorNet {
    fn conv_net(&self) -> &ConvNet {
        &self.net
    }
    fn owner(&self) -> Owner {
        Owner::Discriminator
    }
    fn with_conv_net(&self, net: ConvNet) -> Self {
        Self { config: self.config.clone(), net }
    }
}

fn check_len(spec: &PrunableSpec, n: usize) -> Result<()> {
    if n != spec.units.len() {
        return contract(format!("vector has {n} entries, spec has {} units", spec.units.len()));
    }
    Ok(())
}

impl PrunableSpec {
    /// (unit offset, channel count) of each prunable layer, in order.
    pub fn prunable_layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layers
            .iter()
            .filter(|l| l.prunable)
            .map(|l| (l.unit_offset.expect("prunable layers have offsets"), l.out_channels))
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Stable digest of the layer table, stored in agent checkpoints.
    pub fn checksum(&self) -> String {
        crate::util::sha256_hex(serde_json::to_string(&self.layers).expect("spec serializes").as_bytes())
    }

    /// Cheapest sub-network the at-least-one guard allows (one channel per layer).
    pub fn min_macs(&self) -> f64 {
        let mut v = vec![0.0; self.units.len()];
        for (off, _) in self.prunable_layers() {
            v[off] = 1.0;
        }
        self.eval_macs(&v)
    }

    fn eval_macs(&self, v: &[f64]) -> f64 {
        let sums: Vec<f64> = self
            .layers
            .iter()
            .map(|l| match l.unit_offset {
                Some(off) => v[off..off + l.out_channels].iter().sum(),
                None => l.out_channels as f64,
            })
            .collect();
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let cin: f64 = l
                    .inputs
                    .iter()
                    .map(|inp| match *inp {
                        SpecInput::Fixed(c) => c as f64,
                        SpecInput::Prunable(j) => sums[j],
                    })
                    .sum();
                cin * sums[i] * l.per_channel_pair()
            })
            .sum()
    }

    /// JSON layer table with per-layer MAC subtotals under `v` (all-ones if absent).
    pub fn layer_table(&self, v: Option<&ArchitectureVector>) -> Result<serde_json::Value> {
        let ones = ArchitectureVector::ones(self);
        let v = v.unwrap_or(&ones);
        check_len(self, v.len())?;
        let active = v.as_f64();
        let rows: Vec<serde_json::Value> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let sums = |j: usize| -> f64 {
                    let lj = &self.layers[j];
                    match lj.unit_offset {
                        Some(off) => active[off..off + lj.out_channels].iter().sum(),
                        None => lj.out_channels as f64,
                    }
                };
                let cin: f64 = l
                    .inputs
                    .iter()
                    .map(|inp| match *inp {
                        SpecInput::Fixed(c) => c as f64,
                        SpecInput::Prunable(j) => sums(j),
                    })
                    .sum();
                let cout = sums(i);
                serde_json::json!({
                    "layer": l.id,
                    "prunable": l.prunable,
                    "in_channels": l.in_channels,
                    "out_channels": l.out_channels,
                    "active_in": cin,
                    "active_out": cout,
                    "kernel": [l.kernel_hw.0, l.kernel_hw.1],
                    "out_spatial": [l.out_spatial.0, l.out_spatial.1],
                    "full_macs": l.full_macs,
                    "macs": cin * cout * l.per_channel_pair(),
                })
            })
            .collect();
        Ok(serde_json::json!({
            "owner": self.owner,
            "units": self.units.len(),
            "fixed_macs": self.fixed_macs,
            "t_total": self.t_total,
            "macs": self.eval_macs(&active),
            "layers": rows,
        }))
    }
}

pub fn build_spec<N: Prunable>(net: &N) -> Result<PrunableSpec> {
    build_spec_from(net.conv_net(), net.owner())
}

pub fn build_spec_from(net: &ConvNet, owner: Owner) -> Result<PrunableSpec> {
    let g = &net.graph;
    if g.num_units() == 0 {
        return Err(crate::models::convnet::missing_slot(&format!("{owner:?}")));
    }
    let shapes = g.shapes()?;
    let slots = g.mask_slots();
    let offset_of = |i: usize| slots.iter().find(|s| s.0 == i).map(|s| s.1);

    let layers: Vec<SpecLayer> = g
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let inputs = l
                .inputs
                .iter()
                .map(|inp| match inp.source {
                    Source::Image => SpecInput::Fixed(g.image_channels),
                    Source::Layer(j) if g.layers[j].prunable => SpecInput::Prunable(j),
                    Source::Layer(j) => SpecInput::Fixed(g.layers[j].out_channels),
                })
                .collect();
            let s = shapes[i];
            let k = (l.kernel, l.kernel);
            let out_spatial = (s.out_size, s.out_size);
            SpecLayer {
                id: l.name.clone(),
                inputs,
                in_channels: s.in_channels,
                out_channels: l.out_channels,
                kernel_hw: k,
                out_spatial,
                prunable: l.prunable,
                unit_offset: offset_of(i),
                full_macs: (s.in_channels * l.out_channels * k.0 * k.1 * out_spatial.0 * out_spatial.1) as f64,
            }
        })
        .collect();

    let mut units = Vec::with_capacity(g.num_units());
    for (i, l) in layers.iter().enumerate().filter(|(_, l)| l.prunable) {
        let consumers: Vec<String> = g
            .layers
            .iter()
            .filter(|c| c.inputs.iter().any(|inp| inp.source == Source::Layer(i)))
            .map(|c| c.name.clone())
            .collect();
        for c in 0..l.out_channels {
            units.push(PrunableUnit {
                layer_id: l.id.clone(),
                channel_index: c,
                kernel_hw: l.kernel_hw,
                out_spatial: l.out_spatial,
                consumers: consumers.clone(),
            });
        }
    }

    let fixed_macs: f64 = layers.iter().filter(|l| !l.depends_on_mask()).map(|l| l.full_macs).sum();
    let total: f64 = layers.iter().map(|l| l.full_macs).sum();
    Ok(PrunableSpec { owner, layers, units, fixed_macs, t_total: total - fixed_macs })
}

/// Total MACs (fixed part included) of the sub-network selected by `v`.
pub fn macs_of(spec: &PrunableSpec, v: &[f64]) -> Result<f64> {
    check_len(spec, v.len())?;
    Ok(spec.eval_macs(v))
}

/// Prunable MACs `T(v)`, i.e. `macs_of(v) - fixed_macs`.
pub fn prunable_macs(spec: &PrunableSpec, v: &[f64]) -> Result<f64> {
    Ok(macs_of(spec, v)? - spec.fixed_macs)
}

/// Differentiable `T(v)` for a (soft or straight-through) mask tensor.
pub fn prunable_macs_tensor(spec: &PrunableSpec, v: &Tensor) -> Result<Tensor> {
    check_len(spec, v.dims1()?)?;
    let sums: Vec<Option<Tensor>> = spec
        .layers
        .iter()
        .map(|l| l.unit_offset.map(|off| v.narrow(0, off, l.out_channels)?.sum_all()).transpose())
        .collect::<candle_core::Result<_>>()?;
    let mut total = Tensor::zeros((), v.dtype(), &DEVICE)?;
    for (i, l) in spec.layers.iter().enumerate() {
        if !l.depends_on_mask() {
            continue;
        }
        let mut fixed_in = 0.0;
        let mut soft_in: Option<Tensor> = None;
        for inp in &l.inputs {
            match *inp {
                SpecInput::Fixed(c) => fixed_in += c as f64,
                SpecInput::Prunable(j) => {
                    let s = sums[j].clone().expect("prunable input has a sum");
                    soft_in = Some(match soft_in {
                        Some(acc) => (acc + s)?,
                        None => s,
                    });
                }
            }
        }
        let cin = match soft_in {
            Some(s) => s.affine(1.0, fixed_in)?,
            None => Tensor::new(fixed_in, &DEVICE)?.to_dtype(v.dtype())?,
        };
        let cout = match &sums[i] {
            Some(s) => s.clone(),
            None => Tensor::new(l.out_channels as f64, &DEVICE)?.to_dtype(v.dtype())?,
        };
        total = (total + (cin * cout)?.affine(l.per_channel_pair(), 0.0)?)?;
    }
    Ok(total)
}

/// Rounds a soft vector (0.5 goes to 1) and reactivates the strongest entry
/// of any layer that would otherwise lose every channel.
pub fn harden(spec: &PrunableSpec, v_soft: &[f64]) -> Result<ArchitectureVector> {
    check_len(spec, v_soft.len())?;
    if v_soft.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return contract("soft architecture entries must lie in [0, 1]");
    }
    let mut bits: Vec<u8> = v_soft.iter().map(|&x| (x >= 0.5) as u8).collect();
    for (off, n) in spec.prunable_layers() {
        if bits[off..off + n].iter().all(|&b| b == 0) {
            let best = (0..n)
                .max_by(|&a, &b| v_soft[off + a].total_cmp(&v_soft[off + b]).then(b.cmp(&a)))
                .expect("layers are non-empty");
            bits[off + best] = 1;
        }
    }
    Ok(ArchitectureVector { bits, owner: spec.owner })
}

/// Builds the physically smaller network selected by a hardened vector.
pub fn extract_subnetwork<N: Prunable>(net: &N, v: &ArchitectureVector) -> Result<N> {
    let spec = build_spec(net)?;
    if v.owner != net.owner() {
        return contract(format!("{:?} vector applied to a {:?}", v.owner, net.owner()));
    }
    let keep = v.keep_lists(&spec)?;
    Ok(net.with_conv_net(net.conv_net().extract(&keep)?))
}
