//! The alternating agent-training loop over frozen networks, final
//! extraction, and distillation finetuning of the extracted networks.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::agents::{gumbel_sigmoid_ste, hard_decision, new_agent, tau_at, GumbelDraw, PruningAgent};
use crate::archspec::{build_spec, extract_subnetwork, macs_of, ArchitectureVector, PrunableSpec};
use crate::config::RunConfig;
use crate::datagen::Dataset;
use crate::error::{config, contract, Error, Result};
use crate::manifold::NeighborhoodIndex;
use crate::models::convnet::ForwardOpts;
use crate::models::pretrain::batch_tensors;
use crate::models::{images_to_tensor, DiscriminatorNet, GeneratorNet, PixelRange};
use crate::nn::{scalar, Adam, Module, DEVICE};
use crate::objectives::{
    d_phase_loss, d_term, distillation_losses, finite_or_diverged, g_phase_loss, g_term, Adaptor, PruningBatch,
    PruningNets, PruningWeights,
};
use crate::util::rng_for;

/// One row of the pruning history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub step: usize,
    pub epoch: usize,
    pub sample: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub resource: f64,
    pub sparsity: f64,
    pub t_vg: f64,
    pub active_frac_g: f64,
    pub active_frac_d: f64,
    pub tau: f64,
}

/// Pruning-dataset tensors: sources and cached predictions, NCHW in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct PruningData {
    pub ids: Vec<usize>,
    pub sources: Tensor,
    pub predictions: Tensor,
    position: BTreeMap<usize, usize>,
}

impl PruningData {
    /// `predictions[i]` is `G(x)` for `ds.samples[i]`, in `[0, 1]`.
    pub fn new(ds: &Dataset, predictions: &[Array3<f32>]) -> Result<Self> {
        if ds.is_empty() || predictions.len() != ds.len() {
            return contract(format!("{} predictions for {} samples", predictions.len(), ds.len()));
        }
        let xs: Vec<&Array3<f32>> = ds.samples.iter().map(|s| &s.source_image).collect();
        let ys: Vec<&Array3<f32>> = predictions.iter().collect();
        Ok(Self {
            ids: ds.ids(),
            sources: images_to_tensor(&xs, PixelRange::Signed)?,
            predictions: images_to_tensor(&ys, PixelRange::Signed)?,
            position: ds.ids().into_iter().enumerate().map(|(p, i)| (i, p)).collect(),
        })
    }

    fn row(&self, t: &Tensor, id: usize) -> Result<Tensor> {
        let p = *self.position.get(&id).ok_or_else(|| Error::Lookup(format!("id {id} is not in the pruning set")))?;
        Ok(t.narrow(0, p, 1)?)
    }

    pub fn batch(&self, id: usize, index: &NeighborhoodIndex) -> Result<PruningBatch> {
        let neighbors = index.neighbor_ids(id)?.into_iter().map(|j| self.row(&self.predictions, j)).collect::<Result<_>>()?;
        Ok(PruningBatch { x: self.row(&self.sources, id)?, center: self.row(&self.predictions, id)?, neighbors })
    }
}

/// Agents and bookkeeping of a pruning run.
pub struct PruningRun {
    pub agent_g: PruningAgent,
    pub agent_d: Option<PruningAgent>,
    pub history: Vec<PruneRow>,
    /// Set when phase-isolation probing was requested.
    pub isolation_violations: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct PruneOptions<'a> {
    /// Last-good agent checkpoints are written here on divergence.
    pub checkpoint_dir: Option<&'a Path>,
    /// Compare parameter snapshots around every phase.
    pub check_isolation: bool,
    /// Stop after this many iterations.
    pub max_steps: Option<usize>,
}

fn zeros_embedding(agent: &PruningAgent) -> Result<Tensor> {
    Ok(Tensor::zeros(agent.hidden_dim(), DType::F32, &DEVICE)?)
}

fn vars_equal(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> Result<bool> {
    for ((_, x), (_, y)) in a.iter().zip(b) {
        let d = (x - y)?.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if d != 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn active_fraction(v: &Tensor) -> Result<f64> {
    scalar(&v.mean_all()?)
}

/// Checks that the MAC budget is achievable under the at-least-one guard.
pub fn check_budget(spec: &PrunableSpec, p: f64) -> Result<()> {
    let min = spec.min_macs() - spec.fixed_macs;
    if p * spec.t_total < min {
        return config(format!(
            "budget p = {p} gives {:.0} MACs, below the {min:.0} MACs of the smallest allowed network",
            p * spec.t_total
        ));
    }
    Ok(())
}

/// Trains the agents with frozen `gen` and `disc`.
pub fn prune(
    gen: &GeneratorNet,
    disc: &DiscriminatorNet,
    index: &NeighborhoodIndex,
    data: &PruningData,
    cfg: &RunConfig,
    opts: PruneOptions<'_>,
) -> Result<PruningRun> {
    cfg.validate()?;
    let tog = cfg.ablation;
    let spec_g = build_spec(gen)?;
    let spec_d = build_spec(disc)?;
    check_budget(&spec_g, cfg.prune.p)?;
    if index.k != cfg.index.k {
        return contract(format!("index has k = {}, config asks for {}", index.k, cfg.index.k));
    }
    let mut weights = PruningWeights::from_config(cfg);
    weights.include_center = cfg.index.include_center;

    let mut agent_g = new_agent(&spec_g, &cfg.prune, tog.use_agents, crate::util::derive_seed(cfg.seed, "agent_g"))?;
    let mut agent_d = if tog.prune_d {
        Some(new_agent(&spec_d, &cfg.prune, tog.use_agents, crate::util::derive_seed(cfg.seed, "agent_d"))?)
    } else {
        None
    };
    let mut opt_g = Adam::new(agent_g.vars(), cfg.prune.adam)?;
    let mut opt_d = agent_d.as_ref().map(|a| Adam::new(a.vars(), cfg.prune.adam)).transpose()?;

    let base_digest = (gen.weight_digest()?, disc.weight_digest()?);
    let mut order_rng = rng_for(cfg.seed, "prune/order");
    let mut gumbel_rng = rng_for(cfg.seed, "prune/gumbel");
    let mut drop_rng = rng_for(cfg.seed, "prune/dropout");
    let nets = PruningNets { generator: gen, discriminator: disc, spec_g: &spec_g };

    let n = data.ids.len();
    let total = (cfg.prune.epochs * n).min(opts.max_steps.unwrap_or(usize::MAX));
    let mut history = Vec::with_capacity(total);
    let mut violations = opts.check_isolation.then_some(0usize);
    let zeros_g = zeros_embedding(&agent_g)?;

    'outer: for epoch in 0..cfg.prune.epochs {
        let order = rand::seq::index::sample(&mut order_rng, n, n).into_vec();
        for pos in order {
            let step = history.len();
            if step >= total {
                break 'outer;
            }
            let id = data.ids[pos];
            let batch = data.batch(id, index)?;
            let tau = tau_at(step, total, cfg.prune.tau, cfg.prune.tau_final);
            let exchange = tog.exchange_feedback && tog.use_agents;

            // Step 2-3: v_G from the D-agent's last embedding, no gradient.
            let h_d_prev = match &agent_d {
                Some(a) if exchange => a.last_embedding()?,
                _ => zeros_g.clone(),
            };
            let (o_g, h_g) = agent_g.forward(&h_d_prev, true)?;
            let draw = GumbelDraw::sample(agent_g.num_units(), tau, &mut gumbel_rng)?;
            let (v_g_fixed, _) = gumbel_sigmoid_ste(&o_g.detach(), &draw)?;
            let h_g = h_g.detach();

            // Step 8-13: D-agent phase.
            let snap_g = if violations.is_some() { Some(agent_g.snapshot()?) } else { None };
            let (loss_d, v_d, sparsity) = match (&mut agent_d, &mut opt_d) {
                (Some(ad), Some(od)) => {
                    let peer = if exchange { h_g.clone() } else { zeros_embedding(ad)? };
                    let (o_d, h_d) = ad.forward(&peer, true)?;
                    let draw_d = GumbelDraw::sample(ad.num_units(), tau, &mut gumbel_rng)?;
                    let (v_d, _) = gumbel_sigmoid_ste(&o_d, &draw_d)?;
                    let phase = d_phase_loss(&batch, nets, Some(&v_g_fixed), Some(&v_d), &weights, Some(&mut drop_rng))?;
                    let ld = finite_or_diverged(&phase.loss, "D-agent loss")
                        .map_err(|e| save_last_good(&opts, &agent_g, Some(ad), &spec_g, &spec_d, cfg.seed, step, e))?;
                    od.backward_step(&phase.loss)?;
                    ad.set_last_embedding(&h_d)?;
                    (ld, Some(v_d.detach()), phase.parts.get("sparsity").copied().unwrap_or(0.0))
                }
                _ => {
                    let phase = d_phase_loss(&batch, nets, Some(&v_g_fixed), None, &weights, Some(&mut drop_rng))?;
                    (scalar(&phase.loss)?, None, 1.0)
                }
            };
            if let (Some(v), Some(s)) = (violations.as_mut(), snap_g) {
                if !vars_equal(&s, &agent_g.snapshot()?)? {
                    *v += 1;
                }
            }

            // Step 15-19: G-agent phase with a fresh draw.
            let snap_d = match (&agent_d, violations.is_some()) {
                (Some(a), true) => Some(a.snapshot()?),
                _ => None,
            };
            let h_d_now = match &agent_d {
                Some(a) if exchange => a.last_embedding()?,
                _ => zeros_g.clone(),
            };
            let (o_g, h_g) = agent_g.forward(&h_d_now, true)?;
            let draw = GumbelDraw::sample(agent_g.num_units(), tau, &mut gumbel_rng)?;
            let (v_g, _) = gumbel_sigmoid_ste(&o_g, &draw)?;
            let phase = g_phase_loss(&batch, nets, Some(&v_g), v_d.as_ref(), &weights, Some(&mut drop_rng))?;
            let lg = finite_or_diverged(&phase.loss, "G-agent loss")
                .map_err(|e| save_last_good(&opts, &agent_g, agent_d.as_ref(), &spec_g, &spec_d, cfg.seed, step, e))?;
            opt_g.backward_step(&phase.loss)?;
            agent_g.set_last_embedding(&h_g)?;
            if let (Some(v), Some(s), Some(a)) = (violations.as_mut(), snap_d, &agent_d) {
                if !vars_equal(&s, &a.snapshot()?)? {
                    *v += 1;
                }
            }

            history.push(PruneRow {
                step,
                epoch,
                sample: id,
                loss_g: lg,
                loss_d,
                resource: phase.parts.get("resource").copied().unwrap_or(0.0),
                sparsity,
                t_vg: phase.parts.get("t_vg").copied().unwrap_or(spec_g.t_total),
                active_frac_g: active_fraction(&v_g)?,
                active_frac_d: v_d.as_ref().map(active_fraction).transpose()?.unwrap_or(1.0),
                tau,
            });
        }
    }

    if (gen.weight_digest()?, disc.weight_digest()?) != base_digest {
        return contract("generator or discriminator weights changed during pruning");
    }
    Ok(PruningRun { agent_g, agent_d, history, isolation_violations: violations })
}

#[allow(clippy::too_many_arguments)]
fn save_last_good(
    opts: &PruneOptions<'_>,
    agent_g: &PruningAgent,
    agent_d: Option<&PruningAgent>,
    spec_g: &PrunableSpec,
    spec_d: &PrunableSpec,
    seed: u64,
    step: usize,
    err: Error,
) -> Error {
    let Some(dir) = opts.checkpoint_dir else { return err };
    if let Err(e) = std::fs::create_dir_all(dir) {
        return Error::Divergence(format!("{err}; saving last good agents failed: {e}"));
    }
    let mut saved = agent_g.save(&dir.join("last_good_g.safetensors"), seed, step as u64, spec_g);
    if let Some(a) = agent_d {
        saved = saved.and(a.save(&dir.join("last_good_d.safetensors"), seed, step as u64, spec_d));
    }
    match saved {
        Ok(()) => Error::Divergence(format!("{err}; last good agents saved in {}", dir.display())),
        Err(e) => Error::Divergence(format!("{err}; saving last good agents failed: {e}")),
    }
}

pub fn write_history_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), stage });
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Per-network outcome of extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetReport {
    pub macs: f64,
    pub full_macs: f64,
    pub fixed_macs: f64,
    pub t_total: f64,
    /// `1 - macs / full_macs`.
    pub compression_ratio: f64,
    /// (layer, kept, total)
    pub layers: Vec<(String, usize, usize)>,
    pub bits: Vec<u8>,
}

impl NetReport {
    fn new(spec: &PrunableSpec, v: &ArchitectureVector) -> Result<Self> {
        let macs = macs_of(spec, &v.as_f64())?;
        let full = spec.t_total + spec.fixed_macs;
        Ok(Self {
            macs,
            full_macs: full,
            fixed_macs: spec.fixed_macs,
            t_total: spec.t_total,
            compression_ratio: 1.0 - macs / full,
            layers: v.layer_counts(spec)?,
            bits: v.bits.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeReport {
    pub p: f64,
    pub generator: NetReport,
    pub discriminator: Option<NetReport>,
    /// `p·t_total + fixed_macs` of the generator.
    pub generator_budget: f64,
}

/// Noise-free decisions and physical extraction.
pub fn finalize(
    agent_g: &PruningAgent,
    agent_d: Option<&PruningAgent>,
    gen: &GeneratorNet,
    disc: &DiscriminatorNet,
    cfg: &RunConfig,
) -> Result<(GeneratorNet, DiscriminatorNet, FinalizeReport)> {
    let spec_g = build_spec(gen)?;
    let spec_d = build_spec(disc)?;
    let tau = cfg.prune.tau_final.unwrap_or(cfg.prune.tau);
    let exchange = cfg.ablation.exchange_feedback && cfg.ablation.use_agents;
    let peer_g = match agent_d {
        Some(a) if exchange => a.last_embedding()?,
        _ => zeros_embedding(agent_g)?,
    };
    let v_g = hard_decision(agent_g, &peer_g, &spec_g, tau)?;
    let gen2 = extract_subnetwork(gen, &v_g)?;
    let (disc2, d_report) = match agent_d {
        Some(a) => {
            let peer = if exchange { agent_g.last_embedding()? } else { zeros_embedding(a)? };
            let v_d = hard_decision(a, &peer, &spec_d, tau)?;
            (extract_subnetwork(disc, &v_d)?, Some(NetReport::new(&spec_d, &v_d)?))
        }
        None => (disc.clone(), None),
    };
    let g_report = NetReport::new(&spec_g, &v_g)?;
    let report = FinalizeReport {
        p: cfg.prune.p,
        generator_budget: cfg.prune.p * spec_g.t_total + spec_g.fixed_macs,
        generator: g_report,
        discriminator: d_report,
    };
    Ok((gen2, disc2, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub l1: f64,
    pub kd: f64,
}

/// GAN finetuning of extracted networks, with distillation from `teacher` when enabled.
pub fn finetune(
    gen: &GeneratorNet,
    disc: &DiscriminatorNet,
    teacher: &GeneratorNet,
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<(GeneratorNet, DiscriminatorNet, Vec<FinetuneRow>)> {
    if ds.is_empty() {
        return contract("finetuning needs a non-empty train split");
    }
    let fc = &cfg.finetune;
    let mut g = gen.clone();
    let mut d = disc.clone();
    // Fresh variables so the caller's networks stay untouched.
    g.net = g.net.extract(&full_keep(&g.net))?;
    d.net = d.net.extract(&full_keep(&d.net))?;

    let taps = g.kd_taps();
    let teacher_taps = teacher.kd_taps();
    if taps.len() != teacher_taps.len() {
        return contract("student and teacher expose different distillation taps");
    }
    let mut rng = rng_for(cfg.seed, "finetune/adaptors");
    let adaptors: Vec<Adaptor> = if cfg.ablation.use_kd {
        taps.iter()
            .zip(&teacher_taps)
            .map(|(&s, &t)| {
                Adaptor::new(g.net.graph.layers[s].out_channels, teacher.net.graph.layers[t].out_channels, &mut rng)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut g_vars = g.vars();
    g_vars.extend(adaptors.iter().flat_map(Adaptor::vars));
    let mut opt_g = Adam::new(g_vars, fc.adam)?;
    let mut opt_d = Adam::new(d.vars(), fc.adam)?;
    let mut batch_rng = rng_for(cfg.seed, "finetune/batch");
    let mut drop_rng = rng_for(cfg.seed, "finetune/dropout");
    let batch = fc.batch_size.clamp(1, ds.len());
    let steps = fc.epochs * ds.len().div_ceil(batch);
    let mut rows = Vec::with_capacity(steps);

    for step in 0..steps {
        let picks = rand::seq::index::sample(&mut batch_rng, ds.len(), batch).into_vec();
        let (x, y) = batch_tensors(ds, &picks)?;

        let fake = g
            .forward_with(&x, ForwardOpts { train_norm: true, dropout: Some(&mut drop_rng), ..Default::default() })?
            .output;
        let real_out = d.forward_with(&x, &y, ForwardOpts { train_norm: true, ..Default::default() })?;
        let fake_out = d.forward_with(&x, &fake.detach(), ForwardOpts { train_norm: true, ..Default::default() })?;
        let loss_d = d_term(&[real_out.output], &fake_out.output, cfg.flavor)?;
        let ld = finite_or_diverged(&loss_d, &format!("finetune discriminator loss at step {step}"))?;
        opt_d.backward_step(&loss_d)?;
        d.net.update_running_stats(&real_out.batch_stats)?;

        let g_out = g.forward_with(
            &x,
            ForwardOpts { train_norm: true, dropout: Some(&mut drop_rng), taps: &taps, ..Default::default() },
        )?;
        let s_fake = d.forward_with(&x, &g_out.output, ForwardOpts { train_norm: true, frozen: true, ..Default::default() })?;
        let l1 = (&g_out.output - &y)?.abs()?.mean_all()?;
        let mut loss_g = (g_term(&s_fake.output, cfg.flavor)? + (&l1 * fc.lambda_rec)?)?;
        let mut kd = 0.0;
        if cfg.ablation.use_kd {
            let t_out = teacher.forward_with(&x, ForwardOpts { taps: &teacher_taps, frozen: true, ..Default::default() })?;
            let t_feats: Vec<Tensor> = t_out.taps.iter().map(Tensor::detach).collect();
            let kd_loss = distillation_losses(&g_out.taps, &t_feats, &adaptors, fc.lambda_content, fc.lambda_texture)?;
            kd = scalar(&kd_loss)?;
            loss_g = (loss_g + kd_loss)?;
        }
        let lg = finite_or_diverged(&loss_g, &format!("finetune generator loss at step {step}"))?;
        opt_g.backward_step(&loss_g)?;
        g.net.update_running_stats(&g_out.batch_stats)?;
        rows.push(FinetuneRow { step, loss_d: ld, loss_g: lg, l1: scalar(&l1)? / 2.0, kd });
    }
    Ok((g, d, rows))
}

fn full_keep(net: &crate::models::convnet::ConvNet) -> Vec<Vec<usize>> {
    net.graph.mask_slots().iter().map(|&(_, _, n)| (0..n).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationToggles;
    use crate::datagen::{generate_split, Split};
    use crate::manifold::{factor_embeddings, index_for_run, predict_dataset};
    use crate::models::{DiscriminatorConfig, GeneratorConfig};

    struct Toy {
        cfg: RunConfig,
        ds: Dataset,
        gen: GeneratorNet,
        disc: DiscriminatorNet,
        index: NeighborhoodIndex,
        preds: Vec<Array3<f32>>,
    }

    fn toy(edit: impl FnOnce(&mut RunConfig)) -> Toy {
        let mut cfg = RunConfig::default();
        cfg.data.train = 6;
        cfg.data.image_size = 16;
        cfg.model.base_width = 4;
        cfg.model.depth = 2;
        cfg.model.disc_depth = 2;
        cfg.model.disc_width = 4;
        cfg.index.k = 2;
        cfg.prune.epochs = 1;
        cfg.finetune.epochs = 1;
        cfg.finetune.batch_size = 3;
        edit(&mut cfg);
        cfg.validate().unwrap();
        let ds = generate_split(&cfg.data, Split::Train, cfg.seed).unwrap();
        let mut rng = rng_for(cfg.seed, "toy");
        let gen = GeneratorNet::new(GeneratorConfig::from_model(&cfg.model, 16), &mut rng).unwrap();
        let disc = DiscriminatorNet::new(DiscriminatorConfig::from_model(&cfg.model, 16), &mut rng).unwrap();
        let index = index_for_run(&factor_embeddings(&ds).unwrap(), &cfg.index, None).unwrap();
        let preds = predict_dataset(&gen, &ds).unwrap();
        Toy { cfg, ds, gen, disc, index, preds }
    }

    fn run(t: &Toy, opts: PruneOptions<'_>) -> PruningRun {
        let data = PruningData::new(&t.ds, &t.preds).unwrap();
        prune(&t.gen, &t.disc, &t.index, &data, &t.cfg, opts).unwrap()
    }

    #[test]
    fn zero_epochs_leave_agents_untouched() {
        let t = toy(|c| c.prune.epochs = 0);
        let r = run(&t, PruneOptions::default());
        assert!(r.history.is_empty());
        let fresh = new_agent(
            &build_spec(&t.gen).unwrap(),
            &t.cfg.prune,
            true,
            crate::util::derive_seed(t.cfg.seed, "agent_g"),
        )
        .unwrap();
        assert_eq!(r.agent_g.weight_digest().unwrap(), fresh.weight_digest().unwrap());
    }

    #[test]
    fn history_is_deterministic_and_isolated() {
        let t = toy(|_| {});
        let opts = PruneOptions { check_isolation: true, ..Default::default() };
        let a = run(&t, opts.clone());
        let b = run(&t, opts);
        assert_eq!(a.history.len(), 6);
        assert_eq!(a.history, b.history);
        assert_eq!(a.isolation_violations, Some(0));
        assert_eq!(a.agent_g.weight_digest().unwrap(), b.agent_g.weight_digest().unwrap());
        assert!(a.history.iter().all(|r| r.loss_g.is_finite() && r.loss_d.is_finite()));
    }

    #[test]
    fn infeasible_budget_rejected() {
        let t = toy(|c| c.prune.p = 1e-4);
        let data = PruningData::new(&t.ds, &t.preds).unwrap();
        let r = prune(&t.gen, &t.disc, &t.index, &data, &t.cfg, PruneOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn baseline_has_no_discriminator_agent() {
        let t = toy(|c| c.ablation = AblationToggles::baseline());
        let r = run(&t, PruneOptions::default());
        assert!(r.agent_d.is_none());
        assert!(matches!(r.agent_g, PruningAgent::Naive(_)));
        assert!(r.history.iter().all(|row| row.sparsity == 1.0 && row.active_frac_d == 1.0));
        let (_, d2, rep) = finalize(&r.agent_g, None, &t.gen, &t.disc, &t.cfg).unwrap();
        assert!(rep.discriminator.is_none());
        assert_eq!(d2.weight_digest().unwrap(), t.disc.weight_digest().unwrap());
    }

    #[test]
    fn finalize_report_matches_extracted_network() {
        let t = toy(|_| {});
        let r = run(&t, PruneOptions::default());
        let (g2, _, rep) = finalize(&r.agent_g, r.agent_d.as_ref(), &t.gen, &t.disc, &t.cfg).unwrap();
        let spec2 = build_spec(&g2).unwrap();
        assert_eq!(spec2.t_total + spec2.fixed_macs, rep.generator.macs);
        let ones = ArchitectureVector::ones(&build_spec(&t.gen).unwrap());
        let full = NetReport::new(&build_spec(&t.gen).unwrap(), &ones).unwrap();
        assert_eq!(full.compression_ratio, 0.0);
    }

    #[test]
    fn finetune_distillation_toggle() {
        let t = toy(|_| {});
        let r = run(&t, PruneOptions::default());
        let (g2, d2, _) = finalize(&r.agent_g, r.agent_d.as_ref(), &t.gen, &t.disc, &t.cfg).unwrap();
        let (_, _, with_kd) = finetune(&g2, &d2, &t.gen, &t.ds, &t.cfg).unwrap();
        assert_eq!(with_kd.len(), 2);
        assert!(with_kd.iter().all(|r| r.kd > 0.0));
        let t2 = toy(|c| c.ablation.use_kd = false);
        let (g, _, without) = finetune(&t2.gen, &t2.disc, &t2.gen, &t2.ds, &t2.cfg).unwrap();
        assert!(without.iter().all(|r| r.kd == 0.0));
        // Inputs are not mutated.
        assert_ne!(g.weight_digest().unwrap(), t2.gen.weight_digest().unwrap());
        assert_eq!(t2.gen.weight_digest().unwrap(), toy(|_| {}).gen.weight_digest().unwrap());
    }
}
