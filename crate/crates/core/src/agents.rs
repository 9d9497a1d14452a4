//! Pruning agents: recurrent controllers that emit architecture vectors via a
//! straight-through Gumbel-Sigmoid and exchange architecture embeddings.
//!
//! Sign convention: `v = round(sigmoid(-(o + g)/τ))`, so negative logits keep
//! a channel.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspec::{harden, ArchitectureVector, PrunableSpec};
use crate::error::{contract, Result};
use crate::models::Owner;
use crate::nn::{self, normal_tensor, row_norms, sigmoid, uniform_tensor, CheckpointMeta, Module, DEVICE};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Initial bias of every dense head; negative values start with channels kept.
    pub head_bias_init: f64,
}

impl AgentConfig {
    pub fn from_prune(c: &crate::config::PruneConfig) -> Self {
        Self { input_dim: c.agent_input_dim, hidden_dim: c.agent_hidden_dim, head_bias_init: c.head_bias_init }
    }
}

/// Weight-normalised linear map: `w = g · v / ‖v‖` per output row.
#[derive(Debug, Clone)]
pub struct WnLinear {
    pub v: Var,
    pub g: Var,
    pub b: Var,
}

impl WnLinear {
    fn new(rng: &mut ChaCha8Rng, out: usize, inp: usize, bound: f64, bias: Option<f64>) -> Result<Self> {
        let v = uniform_tensor(rng, &[out, inp], bound)?;
        let g = row_norms(&v)?.flatten_all()?;
        let b = match bias {
            Some(c) => Tensor::full(c as f32, out, &DEVICE)?,
            None => uniform_tensor(rng, &[out], bound)?,
        };
        Ok(Self { v: Var::from_tensor(&v)?, g: Var::from_tensor(&g)?, b: Var::from_tensor(&b)? })
    }

    pub fn weight(&self) -> Result<Tensor> {
        let v = self.v.as_tensor();
        let scale = self.g.as_tensor().reshape(((), 1))?.broadcast_div(&row_norms(v)?)?;
        Ok(v.broadcast_mul(&scale)?)
    }

    /// `x · wᵀ + b` for row-vector inputs.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight()?.t()?)?.broadcast_add(self.b.as_tensor())?)
    }

    fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.v"), self.v.clone()),
            (format!("{prefix}.g"), self.g.clone()),
            (format!("{prefix}.b"), self.b.clone()),
        ]
    }
}

/// GRU(input, hidden) controller with one weight-normalised head per layer.
#[derive(Debug, Clone)]
pub struct RecurrentAgent {
    pub owner: Owner,
    pub config: AgentConfig,
    pub layer_sizes: Vec<usize>,
    pub ih: WnLinear,
    pub hh: WnLinear,
    pub heads: Vec<WnLinear>,
    /// L × input_dim, fixed after initialisation.
    pub input_codes: Tensor,
    pub last_embedding: Tensor,
}

impl RecurrentAgent {
    pub fn new(owner: Owner, layer_sizes: &[usize], config: AgentConfig, seed: u64) -> Result<Self> {
        if layer_sizes.is_empty() || layer_sizes.contains(&0) {
            return contract("agents need at least one non-empty layer");
        }
        let tag = owner_tag(owner);
        let mut theta = rng_for(seed, &format!("agents/{tag}/theta"));
        let mut codes = rng_for(seed, &format!("agents/{tag}/codes"));
        let (i, h) = (config.input_dim, config.hidden_dim);
        let bound = 1.0 / (h as f64).sqrt();
        let ih = WnLinear::new(&mut theta, 3 * h, i, bound, None)?;
        let hh = WnLinear::new(&mut theta, 3 * h, h, bound, None)?;
        let heads = layer_sizes
            .iter()
            .map(|&c| WnLinear::new(&mut theta, c, h, bound, Some(config.head_bias_init)))
            .collect::<Result<_>>()?;
        Ok(Self {
            owner,
            config,
            layer_sizes: layer_sizes.to_vec(),
            ih,
            hh,
            heads,
            input_codes: normal_tensor(&mut codes, &[layer_sizes.len(), i], 0.0, 1.0)?,
            last_embedding: Tensor::zeros(h, DType::F32, &DEVICE)?,
        })
    }

    /// Unrolls the cell over the layers starting from the peer's embedding.
    pub fn forward(&self, peer: &Tensor, treat_peer_constant: bool) -> Result<(Tensor, Tensor)> {
        let hdim = self.config.hidden_dim;
        if peer.dims() != [hdim] {
            return contract(format!("peer embedding has shape {:?}, expected [{hdim}]", peer.dims()));
        }
        let peer = if treat_peer_constant { peer.detach() } else { peer.clone() };
        let gi_all = self.ih.apply(&self.input_codes)?;
        let w_hh = self.hh.weight()?;
        let mut h = peer.reshape((1, hdim))?;
        let mut logits = Vec::with_capacity(self.heads.len());
        for (l, head) in self.heads.iter().enumerate() {
            let gi = gi_all.narrow(0, l, 1)?;
            let gh = h.matmul(&w_hh.t()?)?.broadcast_add(self.hh.b.as_tensor())?;
            let r = sigmoid(&(gi.narrow(1, 0, hdim)? + gh.narrow(1, 0, hdim)?)?)?;
            let z = sigmoid(&(gi.narrow(1, hdim, hdim)? + gh.narrow(1, hdim, hdim)?)?)?;
            let n = (gi.narrow(1, 2 * hdim, hdim)? + (r * gh.narrow(1, 2 * hdim, hdim)?)?)?.tanh()?;
            h = ((z.affine(-1.0, 1.0)? * n)? + (z * &h)?)?;
            logits.push(head.apply(&h.relu()?)?.flatten_all()?);
        }
        Ok((Tensor::cat(&logits, 0)?, h.flatten_all()?))
    }
}

impl Module for RecurrentAgent {
    fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = self.ih.named("gru.ih");
        out.extend(self.hh.named("gru.hh"));
        for (l, head) in self.heads.iter().enumerate() {
            out.extend(head.named(&format!("head{l}")));
        }
        out
    }

    fn named_buffers(&self) -> Vec<(String, Tensor)> {
        vec![("input_codes".into(), self.input_codes.clone()), ("last_embedding".into(), self.last_embedding.clone())]
    }
}

/// Free per-channel logits with no recurrent state (ablation without agents).
#[derive(Debug, Clone)]
pub struct NaiveLogits {
    pub owner: Owner,
    pub layer_sizes: Vec<usize>,
    pub logits: Var,
    pub hidden_dim: usize,
}

impl NaiveLogits {
    pub fn new(owner: Owner, layer_sizes: &[usize], bias: f64, hidden_dim: usize) -> Result<Self> {
        let n: usize = layer_sizes.iter().sum();
        if n == 0 {
            return contract("naive logits need at least one unit");
        }
        Ok(Self {
            owner,
            layer_sizes: layer_sizes.to_vec(),
            logits: Var::from_tensor(&Tensor::full(bias as f32, n, &DEVICE)?)?,
            hidden_dim,
        })
    }
}

impl Module for NaiveLogits {
    fn named_vars(&self) -> Vec<(String, Var)> {
        vec![("logits".into(), self.logits.clone())]
    }
}

/// A controller of either kind.
#[derive(Debug, Clone)]
pub enum PruningAgent {
    Recurrent(RecurrentAgent),
    Naive(NaiveLogits),
}

impl PruningAgent {
    pub fn owner(&self) -> Owner {
        match self {
            Self::Recurrent(a) => a.owner,
            Self::Naive(a) => a.owner,
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        match self {
            Self::Recurrent(a) => &a.layer_sizes,
            Self::Naive(a) => &a.layer_sizes,
        }
    }

    pub fn num_units(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Self::Recurrent(a) => a.config.hidden_dim,
            Self::Naive(a) => a.hidden_dim,
        }
    }

    pub fn last_embedding(&self) -> Result<Tensor> {
        Ok(match self {
            Self::Recurrent(a) => a.last_embedding.clone(),
            Self::Naive(a) => Tensor::zeros(a.hidden_dim, DType::F32, &DEVICE)?,
        })
    }

    pub fn set_last_embedding(&mut self, h: &Tensor) -> Result<()> {
        if let Self::Recurrent(a) = self {
            if !nn::is_finite(h)? {
                return Err(crate::Error::Divergence("agent embedding became non-finite".into()));
            }
            a.last_embedding = h.detach();
        }
        Ok(())
    }

    /// `agent_forward`: returns logits `o` and embedding `h`.
    pub fn forward(&self, peer: &Tensor, treat_peer_constant: bool) -> Result<(Tensor, Tensor)> {
        match self {
            Self::Recurrent(a) => a.forward(peer, treat_peer_constant),
            Self::Naive(a) => Ok((a.logits.as_tensor().clone(), Tensor::zeros(a.hidden_dim, DType::F32, &DEVICE)?)),
        }
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64, spec: &PrunableSpec) -> Result<()> {
        let (kind, config) = match self {
            Self::Recurrent(a) => ("agent", serde_json::to_string(&(a.owner, &a.layer_sizes, a.config))?),
            Self::Naive(a) => ("agent-naive", serde_json::to_string(&(a.owner, &a.layer_sizes, a.hidden_dim))?),
        };
        let extra = BTreeMap::from([("spec_checksum".to_string(), spec.checksum())]);
        let meta = CheckpointMeta { kind: kind.into(), config, seed, step, extra };
        let tensors: Vec<(String, Tensor)> = match self {
            Self::Recurrent(a) => all_tensors(a),
            Self::Naive(a) => all_tensors(a),
        };
        nn::save_checkpoint(path, &tensors, &meta)
    }

    /// Loads an agent and checks it was trained against `spec`.
    pub fn load(path: &Path, spec: &PrunableSpec) -> Result<(Self, CheckpointMeta)> {
        let (mut map, meta) = nn::load_checkpoint(path, "prune")?;
        if meta.extra.get("spec_checksum") != Some(&spec.checksum()) {
            return contract(format!("agent checkpoint {} was trained for a different network", path.display()));
        }
        let agent = match meta.kind.as_str() {
            "agent" => {
                let (owner, sizes, config): (Owner, Vec<usize>, AgentConfig) = serde_json::from_str(&meta.config)?;
                let mut a = RecurrentAgent::new(owner, &sizes, config, 0)?;
                load_into(&mut map, &a.named_vars())?;
                a.input_codes = nn::take(&mut map, "input_codes")?;
                a.last_embedding = nn::take(&mut map, "last_embedding")?;
                Self::Recurrent(a)
            }
            "agent-naive" => {
                let (owner, sizes, hidden): (Owner, Vec<usize>, usize) = serde_json::from_str(&meta.config)?;
                let a = NaiveLogits::new(owner, &sizes, 0.0, hidden)?;
                load_into(&mut map, &a.named_vars())?;
                Self::Naive(a)
            }
            other => return contract(format!("{} is a {other} checkpoint, not an agent", path.display())),
        };
        Ok((agent, meta))
    }
}

impl Module for PruningAgent {
    fn named_vars(&self) -> Vec<(String, Var)> {
        match self {
            Self::Recurrent(a) => a.named_vars(),
            Self::Naive(a) => a.named_vars(),
        }
    }

    fn named_buffers(&self) -> Vec<(String, Tensor)> {
        match self {
            Self::Recurrent(a) => a.named_buffers(),
            Self::Naive(a) => a.named_buffers(),
        }
    }
}

fn all_tensors(m: &impl Module) -> Vec<(String, Tensor)> {
    m.named_vars().into_iter().map(|(n, v)| (n, v.as_tensor().clone())).chain(m.named_buffers()).collect()
}

fn load_into(map: &mut std::collections::HashMap<String, Tensor>, vars: &[(String, Var)]) -> Result<()> {
    for (name, var) in vars {
        let t = nn::take(map, name)?;
        if t.dims() != var.dims() {
            return contract(format!("{name} has shape {:?}, expected {:?}", t.dims(), var.dims()));
        }
        var.set(&t)?;
    }
    Ok(())
}

fn owner_tag(o: Owner) -> &'static str {
    match o {
        Owner::Generator => "g",
        Owner::Discriminator => "d",
    }
}

/// Channel counts of the spec's prunable layers, in unit order.
pub fn layer_sizes(spec: &PrunableSpec) -> Vec<usize> {
    spec.prunable_layers().map(|(_, n)| n).collect()
}

/// Builds the controller for one network.
pub fn new_agent(spec: &PrunableSpec, cfg: &crate::config::PruneConfig, recurrent: bool, seed: u64) -> Result<PruningAgent> {
    let sizes = layer_sizes(spec);
    Ok(if recurrent {
        PruningAgent::Recurrent(RecurrentAgent::new(spec.owner, &sizes, AgentConfig::from_prune(cfg), seed)?)
    } else {
        PruningAgent::Naive(NaiveLogits::new(spec.owner, &sizes, cfg.head_bias_init, cfg.agent_hidden_dim)?)
    })
}

/// Gumbel(0, 1) noise and a temperature.
#[derive(Debug, Clone)]
pub struct GumbelDraw {
    pub g: Tensor,
    pub tau: f64,
}

impl GumbelDraw {
    pub fn sample(n: usize, tau: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let g: Vec<f32> = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
                (-(-u.ln()).ln()) as f32
            })
            .collect();
        Self::new(Tensor::from_vec(g, n, &DEVICE)?, tau)
    }

    pub fn zeros(n: usize, tau: f64) -> Result<Self> {
        Self::new(Tensor::zeros(n, DType::F32, &DEVICE)?, tau)
    }

    pub fn new(g: Tensor, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return crate::error::config(format!("temperature must be positive, got {tau}"));
        }
        Ok(Self { g, tau })
    }
}

/// Returns `(v, v_soft)`: `v` carries hard values forward and `v_soft`'s
/// gradient backward. Ties at 0.5 round to 1.
pub fn gumbel_sigmoid_ste(o: &Tensor, draw: &GumbelDraw) -> Result<(Tensor, Tensor)> {
    let g = draw.g.to_dtype(o.dtype())?;
    let v_soft = sigmoid(&(o + g)?.affine(-1.0 / draw.tau, 0.0)?)?;
    let hard = v_soft.ge(0.5)?.to_dtype(o.dtype())?;
    let v = (&v_soft + (hard - &v_soft)?.detach())?;
    Ok((v, v_soft))
}

/// Linear temperature schedule from `tau` to `tau_final` (constant if absent).
pub fn tau_at(step: usize, total: usize, tau: f64, tau_final: Option<f64>) -> f64 {
    match tau_final {
        Some(end) if total > 1 => tau + (end - tau) * step as f64 / (total - 1) as f64,
        _ => tau,
    }
}

/// Bijection between agent output order and spec unit order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentLayout {
    /// `perm[i]` is the spec index of agent output `i`.
    perm: Vec<usize>,
}

impl AgentLayout {
    pub fn identity(spec: &PrunableSpec) -> Self {
        Self { perm: (0..spec.num_units()).collect() }
    }

    pub fn from_permutation(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return contract("agent layout is not a permutation");
            }
        }
        Ok(Self { perm })
    }
}

/// Agent-ordered bits to a spec-ordered architecture vector.
pub fn map_architecture(v: &[u8], spec: &PrunableSpec, layout: &AgentLayout) -> Result<ArchitectureVector> {
    if v.len() != spec.num_units() || layout.perm.len() != v.len() {
        return contract(format!("agent emitted {} bits, spec has {} units", v.len(), spec.num_units()));
    }
    let mut bits = vec![0u8; v.len()];
    for (i, &p) in layout.perm.iter().enumerate() {
        bits[p] = v[i];
    }
    Ok(ArchitectureVector { bits, owner: spec.owner })
}

/// Inverse of [`map_architecture`].
pub fn unmap_architecture(a: &ArchitectureVector, layout: &AgentLayout) -> Result<Vec<u8>> {
    if a.len() != layout.perm.len() {
        return contract("architecture vector and layout differ in length");
    }
    Ok(layout.perm.iter().map(|&p| a.bits[p]).collect())
}

/// Noise-free decision `round(sigmoid(-o/τ))` with the at-least-one guard.
pub fn hard_decision(agent: &PruningAgent, peer: &Tensor, spec: &PrunableSpec, tau: f64) -> Result<ArchitectureVector> {
    let (o, _) = agent.forward(peer, true)?;
    let v_soft = sigmoid(&o.affine(-1.0 / tau, 0.0)?)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    harden(spec, &v_soft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::build_spec;
    use crate::config::ModelConfig;
    use crate::models::{GeneratorConfig, GeneratorNet};
    use approx::assert_abs_diff_eq;

    fn cfg() -> AgentConfig {
        AgentConfig { input_dim: 128, hidden_dim: 256, head_bias_init: -2.0 }
    }

    fn spec() -> PrunableSpec {
        let m = ModelConfig { base_width: 4, ..Default::default() };
        build_spec(&GeneratorNet::new(GeneratorConfig::from_model(&m, 16), &mut rng_for(0, "g")).unwrap()).unwrap()
    }

    fn vec1(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let a = RecurrentAgent::new(Owner::Generator, &[4, 8, 3], cfg(), 1).unwrap();
        let peer = normal_tensor(&mut rng_for(1, "peer"), &[256], 0.0, 1.0).unwrap();
        let (o, h) = a.forward(&peer, true).unwrap();
        assert_eq!((o.dims1().unwrap(), h.dims1().unwrap()), (15, 256));
        let (o2, h2) = a.forward(&peer, true).unwrap();
        assert_eq!((vec1(&o), vec1(&h)), (vec1(&o2), vec1(&h2)));
        assert!(a.forward(&Tensor::zeros(3, DType::F32, &DEVICE).unwrap(), true).is_err());
    }

    #[test]
    fn peer_gradient_follows_detach_flag() {
        let a = RecurrentAgent::new(Owner::Generator, &[4, 8], cfg(), 2).unwrap();
        let peer = Var::from_tensor(&normal_tensor(&mut rng_for(2, "peer"), &[256], 0.0, 1.0).unwrap()).unwrap();
        let (o, _) = a.forward(peer.as_tensor(), true).unwrap();
        let grads = o.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(&peer).is_none());
        let (o, _) = a.forward(peer.as_tensor(), false).unwrap();
        let grads = o.sum_all().unwrap().backward().unwrap();
        let g = vec1(grads.get(&peer).unwrap());
        assert!(g.iter().any(|x| *x != 0.0));
    }

    #[test]
    fn input_codes_and_weight_norm_init() {
        let a = RecurrentAgent::new(Owner::Discriminator, &[5], cfg(), 3).unwrap();
        let b = RecurrentAgent::new(Owner::Discriminator, &[5], cfg(), 3).unwrap();
        assert_eq!(a.input_codes.to_vec2::<f32>().unwrap(), b.input_codes.to_vec2::<f32>().unwrap());
        // g starts at ‖v‖, so the effective weight equals v.
        let w = a.ih.weight().unwrap();
        let diff = (w - a.ih.v.as_tensor()).unwrap().abs().unwrap().max_keepdim(0).unwrap().max_keepdim(1).unwrap();
        assert!(diff.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0] < 1e-6);
        let (o, _) = a.forward(&Tensor::zeros(256, DType::F32, &DEVICE).unwrap(), true).unwrap();
        assert_eq!(o.dims1().unwrap(), 5);
    }

    #[test]
    fn ste_tabulated_values() {
        let o = Tensor::new(&[-2f32, 2.0, 0.0], &DEVICE).unwrap();
        let (v, s) = gumbel_sigmoid_ste(&o, &GumbelDraw::zeros(3, 1.0).unwrap()).unwrap();
        let s = vec1(&s);
        assert_abs_diff_eq!(s[0], 0.880797, epsilon = 1e-6);
        assert_abs_diff_eq!(s[1], 0.119203, epsilon = 1e-6);
        assert_eq!(s[2], 0.5);
        assert_eq!(vec1(&v), vec![1.0, 0.0, 1.0]);
        // o + g = 0 with nonzero noise also ties to 1.
        let draw = GumbelDraw::new(Tensor::new(&[0.7f32], &DEVICE).unwrap(), 1.0).unwrap();
        let (v, _) = gumbel_sigmoid_ste(&Tensor::new(&[-0.7f32], &DEVICE).unwrap(), &draw).unwrap();
        assert_eq!(vec1(&v), vec![1.0]);
        assert!(GumbelDraw::zeros(1, 0.0).is_err());
    }

    #[test]
    fn ste_gradient_is_soft_derivative() {
        let o = Var::from_tensor(&Tensor::new(&[0.3f64, -1.2, 2.5], &DEVICE).unwrap()).unwrap();
        let tau = 0.5;
        let draw = GumbelDraw::new(Tensor::new(&[0.1f32, -0.4, 0.2], &DEVICE).unwrap(), tau).unwrap();
        let (v, s) = gumbel_sigmoid_ste(o.as_tensor(), &draw).unwrap();
        let g = vec1(v.sum_all().unwrap().backward().unwrap().get(&o).unwrap());
        for (gi, si) in g.iter().zip(vec1(&s)) {
            assert_abs_diff_eq!(*gi, -si * (1.0 - si) / tau, epsilon = 1e-9);
        }
    }

    #[test]
    fn low_temperature_approaches_step() {
        let o = Tensor::new(&[-0.5f64, 0.2, -3.0, 0.11], &DEVICE).unwrap();
        let (_, s) = gumbel_sigmoid_ste(&o, &GumbelDraw::zeros(4, 1e-3).unwrap()).unwrap();
        for (si, oi) in vec1(&s).iter().zip(vec1(&o)) {
            assert_abs_diff_eq!(*si, if oi < 0.0 { 1.0 } else { 0.0 }, epsilon = 1e-6);
        }
    }

    #[test]
    fn layout_mapping() {
        let spec = spec();
        let n = spec.num_units();
        let bits: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let id = AgentLayout::identity(&spec);
        assert_eq!(map_architecture(&bits, &spec, &id).unwrap().bits, bits);
        let rev = AgentLayout::from_permutation((0..n).rev().collect()).unwrap();
        let mapped = map_architecture(&bits, &spec, &rev).unwrap();
        assert_eq!(mapped.bits, bits.iter().rev().copied().collect::<Vec<_>>());
        assert_eq!(unmap_architecture(&mapped, &rev).unwrap(), bits);
        assert!(map_architecture(&bits[1..], &spec, &id).is_err());
        assert!(AgentLayout::from_permutation(vec![0, 0]).is_err());
    }

    fn naive_with(spec: &PrunableSpec, value: f64) -> PruningAgent {
        PruningAgent::Naive(NaiveLogits::new(spec.owner, &layer_sizes(spec), value, 256).unwrap())
    }

    #[test]
    fn hard_decision_cases() {
        let spec = spec();
        let zeros = Tensor::zeros(256, DType::F32, &DEVICE).unwrap();
        let keep = hard_decision(&naive_with(&spec, -10.0), &zeros, &spec, 1.0).unwrap();
        assert_eq!(keep.active(), spec.num_units());
        let drop = hard_decision(&naive_with(&spec, 10.0), &zeros, &spec, 1.0).unwrap();
        assert_eq!(drop.active(), spec.prunable_layers().count());
        let a = new_agent(&spec, &crate::config::PruneConfig::default(), true, 4).unwrap();
        assert_eq!(hard_decision(&a, &zeros, &spec, 1.0).unwrap(), hard_decision(&a, &zeros, &spec, 1.0).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_spec_check() {
        let spec = spec();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("agent.safetensors");
        let mut a = new_agent(&spec, &crate::config::PruneConfig::default(), true, 5).unwrap();
        a.set_last_embedding(&Tensor::ones(256, DType::F32, &DEVICE).unwrap()).unwrap();
        a.save(&p, 5, 9, &spec).unwrap();
        let (b, meta) = PruningAgent::load(&p, &spec).unwrap();
        assert_eq!(meta.step, 9);
        assert_eq!(a.weight_digest().unwrap(), b.weight_digest().unwrap());
        let other = {
            let m = ModelConfig { base_width: 8, ..Default::default() };
            build_spec(&GeneratorNet::new(GeneratorConfig::from_model(&m, 16), &mut rng_for(0, "g")).unwrap()).unwrap()
        };
        assert!(PruningAgent::load(&p, &other).is_err());
    }

    #[test]
    fn tau_schedule() {
        assert_eq!(tau_at(5, 10, 1.0, None), 1.0);
        assert_eq!(tau_at(0, 11, 1.0, Some(0.5)), 1.0);
        assert_abs_diff_eq!(tau_at(10, 11, 1.0, Some(0.5)), 0.5, epsilon = 1e-12);
    }
}
