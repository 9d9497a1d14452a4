//! Loss terms: GAN terms, the manifold-pruning objective, the resource and
//! sparsity regularizers and the finetuning distillation losses.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::archspec::{prunable_macs_tensor, PrunableSpec};
use crate::config::GanFlavor;
use crate::error::{config, contract, Error, Result};
use crate::models::convnet::ForwardOpts;
use crate::models::{DiscriminatorNet, GeneratorNet};
use crate::nn::{self, normal_tensor, scalar, DEVICE};

/// Scalar summaries of one pruning step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub loss_g: f64,
    pub loss_d: f64,
    pub resource: f64,
    pub sparsity: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.loss_g, self.loss_d, self.resource, self.sparsity].iter().all(|x| x.is_finite())
            && self.components.values().all(|x| x.is_finite())
    }
}

/// Returns `(d_term, g_term)`. Real maps are averaged.
pub fn gan_losses(real_scores: &[Tensor], fake_scores: &Tensor, flavor: GanFlavor) -> Result<(Tensor, Tensor)> {
    Ok((d_term(real_scores, fake_scores, flavor)?, g_term(fake_scores, flavor)?))
}

pub fn d_term(real_scores: &[Tensor], fake_scores: &Tensor, flavor: GanFlavor) -> Result<Tensor> {
    if real_scores.is_empty() {
        return contract("gan loss needs at least one real score map");
    }
    let real_one = |s: &Tensor| -> candle_core::Result<Tensor> {
        match flavor {
            GanFlavor::Hinge => s.affine(-1.0, 1.0)?.relu()?.mean_all(),
            GanFlavor::Lsgan => s.affine(1.0, -1.0)?.sqr()?.mean_all(),
        }
    };
    let mut acc = real_one(&real_scores[0])?;
    for s in &real_scores[1..] {
        acc = (acc + real_one(s)?)?;
    }
    let real = (acc / real_scores.len() as f64)?;
    let fake = match flavor {
        GanFlavor::Hinge => fake_scores.affine(1.0, 1.0)?.relu()?.mean_all()?,
        GanFlavor::Lsgan => fake_scores.sqr()?.mean_all()?,
    };
    Ok((real + fake)?)
}

pub fn g_term(fake_scores: &Tensor, flavor: GanFlavor) -> Result<Tensor> {
    Ok(match flavor {
        GanFlavor::Hinge => fake_scores.mean_all()?.neg()?,
        GanFlavor::Lsgan => fake_scores.affine(1.0, -1.0)?.sqr()?.mean_all()?,
    })
}

/// `ln(max(T(v), p·T_total) / (p·T_total))` with `T` the prunable MACs.
pub fn resource_loss(spec: &PrunableSpec, v: &Tensor, p: f64) -> Result<Tensor> {
    if !(p > 0.0 && p <= 1.0) {
        return config(format!("budget fraction p must lie in (0, 1], got {p}"));
    }
    let budget = p * spec.t_total;
    let t = prunable_macs_tensor(spec, &v.to_dtype(DType::F64)?)?;
    let floor = Tensor::new(budget, &DEVICE)?;
    Ok(t.maximum(&floor)?.broadcast_div(&floor)?.log()?.to_dtype(v.dtype())?)
}

/// Mean of the discriminator mask entries.
pub fn sparsity_loss(v_d: &Tensor) -> Result<Tensor> {
    if v_d.elem_count() == 0 {
        return contract("sparsity loss of an empty vector");
    }
    Ok(v_d.mean_all()?)
}

/// One pruning-dataset minibatch, all tensors NCHW in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct PruningBatch {
    pub x: Tensor,
    /// Prediction `y'_i` of the unpruned generator.
    pub center: Tensor,
    /// `k` tensors; entry `j` stacks the `j`-th neighbour of every centre.
    pub neighbors: Vec<Tensor>,
}

/// Frozen networks under pruning.
#[derive(Clone, Copy)]
pub struct PruningNets<'a> {
    pub generator: &'a GeneratorNet,
    pub discriminator: &'a DiscriminatorNet,
    pub spec_g: &'a PrunableSpec,
}

/// Objective weights and real-set options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruningWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub p: f64,
    pub flavor: GanFlavor,
    pub include_center: bool,
    /// When false the real set is the centre alone.
    pub manifold_real_set: bool,
}

impl PruningWeights {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        Self {
            lambda1: cfg.prune.lambda1,
            lambda2: cfg.prune.lambda2,
            p: cfg.prune.p,
            flavor: cfg.flavor,
            include_center: cfg.index.include_center,
            manifold_real_set: cfg.ablation.manifold_real_set,
        }
    }
}

/// Differentiable phase losses plus logged scalars.
#[derive(Debug)]
pub struct PhaseLoss {
    pub loss: Tensor,
    pub parts: BTreeMap<String, f64>,
}

fn frozen<'a>(mask: Option<&'a Tensor>, dropout: Option<&'a mut ChaCha8Rng>) -> ForwardOpts<'a> {
    ForwardOpts { mask, dropout, frozen: true, ..Default::default() }
}

fn real_set(batch: &PruningBatch, w: &PruningWeights) -> Result<Vec<Tensor>> {
    if !w.manifold_real_set {
        return Ok(vec![batch.center.clone()]);
    }
    if batch.neighbors.is_empty() {
        return Err(Error::Data("pruning batch carries no neighbours".into()));
    }
    let mut reals = batch.neighbors.clone();
    if w.include_center {
        reals.push(batch.center.clone());
    }
    Ok(reals)
}

/// D-agent loss: `d_term + λ₂·L(v_D)` with the fake detached from `v_G`.
pub fn d_phase_loss(
    batch: &PruningBatch,
    nets: PruningNets<'_>,
    v_g: Option<&Tensor>,
    v_d: Option<&Tensor>,
    w: &PruningWeights,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<PhaseLoss> {
    let v_g = v_g.map(|v| v.detach());
    let fake = nets.generator.forward_with(&batch.x, frozen(v_g.as_ref(), dropout))?.output.detach();
    // One batched pass over [reals..., fake]; norms run on running statistics
    // so batching does not change any score.
    let reals = real_set(batch, w)?;
    let b = batch.x.dim(0)?;
    let mut ys = reals;
    ys.push(fake);
    let m = ys.len();
    let xs = Tensor::cat(&vec![batch.x.clone(); m], 0)?;
    let scores = nets.discriminator.forward_with(&xs, &Tensor::cat(&ys, 0)?, frozen(v_d, None))?.output;
    let s_real = (0..m - 1).map(|j| scores.narrow(0, j * b, b)).collect::<candle_core::Result<Vec<_>>>()?;
    let s_fake = scores.narrow(0, (m - 1) * b, b)?;
    let dt = d_term(&s_real, &s_fake, w.flavor)?;
    let mut parts = BTreeMap::from([("d_term".to_string(), scalar(&dt)?)]);
    let loss = match v_d {
        Some(v) => {
            let sp = sparsity_loss(v)?;
            parts.insert("sparsity".into(), scalar(&sp)?);
            (dt + (sp * w.lambda2)?)?
        }
        None => dt,
    };
    Ok(PhaseLoss { loss, parts })
}

/// G-agent loss: `g_term + λ₁·R(v_G)` with `v_D` detached.
pub fn g_phase_loss(
    batch: &PruningBatch,
    nets: PruningNets<'_>,
    v_g: Option<&Tensor>,
    v_d: Option<&Tensor>,
    w: &PruningWeights,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<PhaseLoss> {
    let fake = nets.generator.forward_with(&batch.x, frozen(v_g, dropout))?.output;
    let v_d = v_d.map(|v| v.detach());
    let s_fake = nets.discriminator.forward_with(&batch.x, &fake, frozen(v_d.as_ref(), None))?.output;
    let gt = g_term(&s_fake, w.flavor)?;
    let mut parts = BTreeMap::from([("g_term".to_string(), scalar(&gt)?)]);
    let loss = match v_g {
        Some(v) => {
            let r = resource_loss(nets.spec_g, v, w.p)?;
            parts.insert("resource".into(), scalar(&r)?);
            parts.insert("t_vg".into(), crate::archspec::prunable_macs(nets.spec_g, &to_f64(v)?)?);
            (gt + (r * w.lambda1)?)?
        }
        None => gt,
    };
    Ok(PhaseLoss { loss, parts })
}

fn to_f64(v: &Tensor) -> Result<Vec<f64>> {
    Ok(v.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

/// Both phase losses evaluated for one pair of masks.
pub fn pruning_step_losses(
    batch: &PruningBatch,
    nets: PruningNets<'_>,
    v_g: &Tensor,
    v_d: &Tensor,
    w: &PruningWeights,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, Tensor, LossBundle)> {
    let d = d_phase_loss(batch, nets, Some(v_g), Some(v_d), w, dropout.as_deref_mut())?;
    let g = g_phase_loss(batch, nets, Some(v_g), Some(v_d), w, dropout)?;
    let mut components = d.parts.clone();
    components.extend(g.parts.clone());
    components.insert("active_frac_d".into(), scalar(&v_d.mean_all()?)?);
    let bundle = LossBundle {
        loss_g: scalar(&g.loss)?,
        loss_d: scalar(&d.loss)?,
        resource: components.get("resource").copied().unwrap_or(0.0),
        sparsity: components.get("sparsity").copied().unwrap_or(0.0),
        components,
    };
    Ok((d.loss, g.loss, bundle))
}

/// Learnable 1×1 map from student to teacher channels.
#[derive(Debug, Clone)]
pub struct Adaptor {
    pub weight: Var,
    pub bias: Var,
}

impl Adaptor {
    pub fn new(student: usize, teacher: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let std = (1.0 / student as f64).sqrt();
        Ok(Self {
            weight: Var::from_tensor(&normal_tensor(rng, &[teacher, student, 1, 1], 0.0, std)?)?,
            bias: Var::zeros(teacher, DType::F32, &DEVICE)?,
        })
    }

    pub fn identity(channels: usize) -> Result<Self> {
        let eye = Tensor::eye(channels, DType::F32, &DEVICE)?.reshape((channels, channels, 1, 1))?;
        Ok(Self { weight: Var::from_tensor(&eye)?, bias: Var::zeros(channels, DType::F32, &DEVICE)? })
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn apply(&self, f: &Tensor) -> Result<Tensor> {
        let y = f.conv2d(self.weight.as_tensor(), 0, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Per-sample Gram matrices normalised by `C·H·W`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let flat = f.reshape((b, c, h * w))?;
    Ok((flat.matmul(&flat.t()?)? / (c * h * w) as f64)?)
}

/// `λ_c·Σ‖a(f_s) − f_t‖² + λ_t·Σ‖Gram(a(f_s)) − Gram(f_t)‖_F`, batch-averaged.
pub fn distillation_losses(
    student_feats: &[Tensor],
    teacher_feats: &[Tensor],
    adaptors: &[Adaptor],
    lambda_content: f64,
    lambda_texture: f64,
) -> Result<Tensor> {
    if student_feats.len() != teacher_feats.len() || student_feats.len() != adaptors.len() {
        return contract("distillation needs one adaptor per feature pair");
    }
    let mut total = Tensor::zeros((), DType::F32, &DEVICE)?;
    for ((fs, ft), a) in student_feats.iter().zip(teacher_feats).zip(adaptors) {
        let (bs, _, hs, ws) = fs.dims4()?;
        let (bt, _, ht, wt) = ft.dims4()?;
        if (bs, hs, ws) != (bt, ht, wt) {
            return contract(format!("feature size mismatch {:?} vs {:?}", fs.dims(), ft.dims()));
        }
        let s = a.apply(fs)?;
        if s.dims() != ft.dims() {
            return contract(format!("adaptor maps to {:?}, teacher has {:?}", s.dims(), ft.dims()));
        }
        let content = ((&s - ft)?.sqr()?.sum_all()? / bs as f64)?;
        let gd = (gram(&s)? - gram(ft)?)?;
        // Small epsilon keeps the square root differentiable at zero.
        let texture = (gd.sqr()?.sum((1, 2))? + 1e-12)?.sqrt()?.mean_all()?;
        total = (total + (content * lambda_content)? + (texture * lambda_texture)?)?;
    }
    Ok(total)
}

pub fn finite_or_diverged(t: &Tensor, what: &str) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() || !nn::is_finite(t)? {
        return Err(Error::Divergence(format!("{what} became non-finite")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::build_spec;
    use crate::config::ModelConfig;
    use crate::models::{DiscriminatorConfig, GeneratorConfig};
    use crate::util::rng_for;
    use approx::assert_abs_diff_eq;

    fn full(v: f32, shape: &[usize]) -> Tensor {
        Tensor::full(v, shape, &DEVICE).unwrap()
    }

    #[test]
    fn gan_terms_trivial_values() {
        let (d, _) = gan_losses(&[full(1.0, &[2, 1, 4, 4])], &full(-1.0, &[2, 1, 4, 4]), GanFlavor::Hinge).unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
        let (d, g) = gan_losses(&[full(1.0, &[1, 1, 4, 4])], &full(0.0, &[1, 1, 4, 4]), GanFlavor::Lsgan).unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
        assert_eq!(scalar(&g).unwrap(), 1.0);
        let g = g_term(&full(0.0, &[1, 1, 4, 4]), GanFlavor::Hinge).unwrap();
        assert_eq!(scalar(&g).unwrap(), 0.0);
        assert!(matches!(gan_losses(&[], &full(0.0, &[1]), GanFlavor::Hinge), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_real_maps_average_to_one() {
        let mut rng = rng_for(3, "t");
        let s = normal_tensor(&mut rng, &[2, 1, 4, 4], 0.0, 1.0).unwrap();
        let f = normal_tensor(&mut rng, &[2, 1, 4, 4], 0.0, 1.0).unwrap();
        for flavor in [GanFlavor::Hinge, GanFlavor::Lsgan] {
            let one = scalar(&d_term(&[s.clone()], &f, flavor).unwrap()).unwrap();
            let three = scalar(&d_term(&[s.clone(), s.clone(), s.clone()], &f, flavor).unwrap()).unwrap();
            assert_abs_diff_eq!(one, three, epsilon = 1e-6);
        }
    }

    fn small_nets() -> (GeneratorNet, DiscriminatorNet, PrunableSpec) {
        let m = ModelConfig { base_width: 4, ..Default::default() };
        let mut rng = rng_for(1, "nets");
        let g = GeneratorNet::new(GeneratorConfig::from_model(&m, 16), &mut rng).unwrap();
        let d = DiscriminatorNet::new(DiscriminatorConfig::from_model(&m, 16), &mut rng).unwrap();
        let spec = build_spec(&g).unwrap();
        (g, d, spec)
    }

    #[test]
    fn resource_loss_values_and_clamp_gradient() {
        let (_, _, spec) = small_nets();
        let ones = Tensor::ones(spec.num_units(), DType::F32, &DEVICE).unwrap();
        // At p = 1 the full network sits exactly on budget.
        assert_abs_diff_eq!(scalar(&resource_loss(&spec, &ones, 1.0).unwrap()).unwrap(), 0.0, epsilon = 1e-9);
        // At p = 0.5 the full network costs twice the budget.
        assert_abs_diff_eq!(scalar(&resource_loss(&spec, &ones, 0.5).unwrap()).unwrap(), 2f64.ln(), epsilon = 1e-6);
        let v = Var::from_tensor(&Tensor::full(0.1f32, spec.num_units(), &DEVICE).unwrap()).unwrap();
        let r = resource_loss(&spec, v.as_tensor(), 0.9).unwrap();
        assert_eq!(scalar(&r).unwrap(), 0.0);
        let grads = r.backward().unwrap();
        let g = grads.get(&v).map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap()).unwrap_or(0.0);
        assert_eq!(g, 0.0);
        assert!(matches!(resource_loss(&spec, &ones, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn sparsity_trivial_values() {
        assert_eq!(scalar(&sparsity_loss(&full(1.0, &[8])).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&sparsity_loss(&full(0.0, &[8])).unwrap()).unwrap(), 0.0);
        let half = Tensor::new(&[1f32, 0., 1., 0.], &DEVICE).unwrap();
        assert_eq!(scalar(&sparsity_loss(&half).unwrap()).unwrap(), 0.5);
        assert!(sparsity_loss(&Tensor::zeros(0, DType::F32, &DEVICE).unwrap()).is_err());
    }

    fn batch(seed: u64) -> PruningBatch {
        let mut rng = rng_for(seed, "batch");
        let img = |rng: &mut ChaCha8Rng| normal_tensor(rng, &[2, 3, 16, 16], 0.0, 0.5).unwrap().clamp(-1f32, 1f32).unwrap();
        PruningBatch { x: img(&mut rng), center: img(&mut rng), neighbors: vec![img(&mut rng), img(&mut rng)] }
    }

    fn weights() -> PruningWeights {
        PruningWeights {
            lambda1: 3.0,
            lambda2: 0.1,
            p: 0.5,
            flavor: GanFlavor::Hinge,
            include_center: true,
            manifold_real_set: true,
        }
    }

    #[test]
    fn phase_losses_are_isolated() {
        let (g, d, spec) = small_nets();
        let spec_d = build_spec(&d).unwrap();
        let nets = PruningNets { generator: &g, discriminator: &d, spec_g: &spec };
        let vg = Var::from_tensor(&Tensor::full(0.8f32, spec.num_units(), &DEVICE).unwrap()).unwrap();
        let vd = Var::from_tensor(&Tensor::full(0.7f32, spec_d.num_units(), &DEVICE).unwrap()).unwrap();
        let b = batch(5);
        let (ld, lg, bundle) =
            pruning_step_losses(&b, nets, vg.as_tensor(), vd.as_tensor(), &weights(), None).unwrap();
        assert!(bundle.is_finite());
        let gd = ld.backward().unwrap();
        assert!(gd.get(&vg).is_none());
        assert!(gd.get(&vd).is_some());
        let gg = lg.backward().unwrap();
        assert!(gg.get(&vd).is_none());
        assert!(gg.get(&vg).is_some());
        for (_, var) in crate::nn::Module::named_vars(&g).iter().chain(crate::nn::Module::named_vars(&d).iter()) {
            assert!(gd.get(var).is_none() && gg.get(var).is_none());
        }
    }

    #[test]
    fn zero_lambdas_reduce_to_gan_terms() {
        let (g, d, spec) = small_nets();
        let spec_d = build_spec(&d).unwrap();
        let nets = PruningNets { generator: &g, discriminator: &d, spec_g: &spec };
        let vg = Tensor::ones(spec.num_units(), DType::F32, &DEVICE).unwrap();
        let vd = Tensor::ones(spec_d.num_units(), DType::F32, &DEVICE).unwrap();
        let w = PruningWeights { lambda1: 0.0, lambda2: 0.0, ..weights() };
        let (_, _, bundle) = pruning_step_losses(&batch(6), nets, &vg, &vd, &w, None).unwrap();
        assert_abs_diff_eq!(bundle.loss_d, bundle.components["d_term"], epsilon = 1e-6);
        assert_abs_diff_eq!(bundle.loss_g, bundle.components["g_term"], epsilon = 1e-6);
    }

    #[test]
    fn sparsity_sign_raises_d_loss() {
        let (g, d, spec) = small_nets();
        let n = build_spec(&d).unwrap().num_units();
        let nets = PruningNets { generator: &g, discriminator: &d, spec_g: &spec };
        let b = batch(7);
        let w = weights();
        // Same D output (mask unused in the forward) with different sparsity values.
        let lo = Tensor::full(0.2f32, n, &DEVICE).unwrap();
        let hi = Tensor::full(0.9f32, n, &DEVICE).unwrap();
        let base = d_phase_loss(&b, nets, None, None, &w, None).unwrap();
        let a = scalar(&base.loss).unwrap() + w.lambda2 * scalar(&sparsity_loss(&lo).unwrap()).unwrap();
        let c = scalar(&base.loss).unwrap() + w.lambda2 * scalar(&sparsity_loss(&hi).unwrap()).unwrap();
        assert!(c > a);
        let with = d_phase_loss(&b, nets, None, Some(&hi), &w, None).unwrap();
        assert!(with.parts["sparsity"] > 0.8);
    }

    #[test]
    fn center_as_single_neighbour_matches_plain_gan() {
        let (g, d, spec) = small_nets();
        let nets = PruningNets { generator: &g, discriminator: &d, spec_g: &spec };
        let b0 = batch(8);
        let b = PruningBatch { neighbors: vec![b0.center.clone()], ..b0.clone() };
        let manifold = d_phase_loss(&b, nets, None, None, &weights(), None).unwrap();
        let plain_w = PruningWeights { manifold_real_set: false, ..weights() };
        let plain = d_phase_loss(&b0, nets, None, None, &plain_w, None).unwrap();
        assert_abs_diff_eq!(scalar(&manifold.loss).unwrap(), scalar(&plain.loss).unwrap(), epsilon = 1e-6);
    }

    #[test]
    fn missing_neighbours_is_data_error() {
        let (g, d, spec) = small_nets();
        let nets = PruningNets { generator: &g, discriminator: &d, spec_g: &spec };
        let b = PruningBatch { neighbors: vec![], ..batch(9) };
        assert!(matches!(d_phase_loss(&b, nets, None, None, &weights(), None), Err(Error::Data(_))));
    }

    #[test]
    fn distillation_trivial_and_hand_values() {
        let mut rng = rng_for(2, "kd");
        let f = normal_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0).unwrap();
        let id = Adaptor::identity(3).unwrap();
        let same = distillation_losses(&[f.clone()], &[f.clone()], &[id.clone()], 1.0, 1.0).unwrap();
        assert!(scalar(&same).unwrap() < 1e-5);
        let g = normal_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0).unwrap();
        assert_eq!(scalar(&distillation_losses(&[f.clone()], &[g], &[id.clone()], 0.0, 0.0).unwrap()).unwrap(), 0.0);

        // One channel, 2×2: s = [1,2,3,4], t = [0,1,0,1].
        let s = Tensor::new(&[1f32, 2., 3., 4.], &DEVICE).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let t = Tensor::new(&[0f32, 1., 0., 1.], &DEVICE).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let id1 = Adaptor::identity(1).unwrap();
        // content: 1 + 1 + 9 + 9 = 20; gram: 30/4 vs 2/4, difference 7.
        let c = scalar(&distillation_losses(&[s.clone()], &[t.clone()], &[id1.clone()], 1.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(c, 20.0, epsilon = 1e-5);
        let tx = scalar(&distillation_losses(&[s.clone()], &[t.clone()], &[id1.clone()], 0.0, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(tx, 7.0, epsilon = 1e-5);

        let bad = normal_tensor(&mut rng, &[2, 3, 2, 2], 0.0, 1.0).unwrap();
        assert!(matches!(distillation_losses(&[f], &[bad], &[id], 1.0, 1.0), Err(Error::Contract(_))));
    }
}
