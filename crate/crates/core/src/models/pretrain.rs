//! Paired GAN pretraining of the original generator and discriminator.

use candle_core::Tensor;
use ndarray::Array3;
use serde::Serialize;

use super::convnet::ForwardOpts;
use super::nets::{images_to_tensor, DiscriminatorConfig, DiscriminatorNet, GeneratorConfig, GeneratorNet, PixelRange};
use crate::config::RunConfig;
use crate::datagen::Dataset;
use crate::error::{contract, Error, Result};
use crate::nn::{scalar, Adam, Module};
use crate::objectives::{d_term, g_term};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainHistory {
    pub rows: Vec<PretrainRow>,
    /// Mean absolute error on the validation split, `[0, 1]` pixel units.
    pub val_l1: f64,
    pub warning: Option<String>,
}

pub(crate) fn batch_tensors(ds: &Dataset, picks: &[usize]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<&Array3<f32>> = picks.iter().map(|&i| &ds.samples[i].source_image).collect();
    let ys: Vec<&Array3<f32>> = picks.iter().map(|&i| &ds.samples[i].target_image).collect();
    Ok((images_to_tensor(&xs, PixelRange::Signed)?, images_to_tensor(&ys, PixelRange::Signed)?))
}

/// Mean absolute error of deterministic predictions, in `[0, 1]` units.
pub fn reconstruction_l1(g: &GeneratorNet, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return contract("reconstruction error of an empty split");
    }
    let mut total = 0.0;
    for start in (0..ds.len()).step_by(64) {
        let picks: Vec<usize> = (start..(start + 64).min(ds.len())).collect();
        let (x, y) = batch_tensors(ds, &picks)?;
        let out = g.forward(&x, None, None)?;
        total += scalar(&(out - y)?.abs()?.sum_all()?)? / 2.0;
    }
    let (h, w, c) = ds.samples[0].target_image.dim();
    Ok(total / (ds.len() * h * w * c) as f64)
}

/// Trains G with `f_G + λ_rec·L1` and D with `f_D` on paired samples.
pub fn pretrain_gan(
    train: &Dataset,
    val: &Dataset,
    cfg: &RunConfig,
) -> Result<(GeneratorNet, DiscriminatorNet, PretrainHistory)> {
    if train.is_empty() {
        return contract("pretraining needs a non-empty train split");
    }
    let pc = &cfg.pretrain;
    let mut init = rng_for(cfg.seed, "pretrain/init");
    let mut g = GeneratorNet::new(GeneratorConfig::from_model(&cfg.model, train.image_size), &mut init)?;
    let mut d = DiscriminatorNet::new(DiscriminatorConfig::from_model(&cfg.model, train.image_size), &mut init)?;
    let mut opt_g = Adam::new(g.vars(), pc.adam)?;
    let mut opt_d = Adam::new(d.vars(), pc.adam)?;
    let mut batch_rng = rng_for(cfg.seed, "pretrain/batch");
    let mut drop_rng = rng_for(cfg.seed, "pretrain/dropout");
    let batch = pc.batch_size.clamp(1, train.len());
    let mut rows = Vec::with_capacity(pc.steps);

    for step in 0..pc.steps {
        let picks = rand::seq::index::sample(&mut batch_rng, train.len(), batch).into_vec();
        let (x, y) = batch_tensors(train, &picks)?;

        let fake = g
            .forward_with(&x, ForwardOpts { train_norm: true, dropout: Some(&mut drop_rng), ..Default::default() })?
            .output;
        let real_out = d.forward_with(&x, &y, ForwardOpts { train_norm: true, ..Default::default() })?;
        let fake_out = d.forward_with(&x, &fake.detach(), ForwardOpts { train_norm: true, ..Default::default() })?;
        let loss_d = d_term(&[real_out.output], &fake_out.output, cfg.flavor)?;
        let ld = scalar(&loss_d)?;
        if !ld.is_finite() {
            return Err(Error::Divergence(format!("pretrain discriminator loss became {ld} at step {step}")));
        }
        opt_d.backward_step(&loss_d)?;
        d.net.update_running_stats(&real_out.batch_stats)?;

        let g_out =
            g.forward_with(&x, ForwardOpts { train_norm: true, dropout: Some(&mut drop_rng), ..Default::default() })?;
        let s_fake = d.forward_with(&x, &g_out.output, ForwardOpts { train_norm: true, frozen: true, ..Default::default() })?;
        let l1 = (&g_out.output - &y)?.abs()?.mean_all()?;
        let loss_g = (g_term(&s_fake.output, cfg.flavor)? + (&l1 * pc.lambda_rec)?)?;
        let lg = scalar(&loss_g)?;
        if !lg.is_finite() {
            return Err(Error::Divergence(format!("pretrain generator loss became {lg} at step {step}")));
        }
        opt_g.backward_step(&loss_g)?;
        g.net.update_running_stats(&g_out.batch_stats)?;

        rows.push(PretrainRow { step, loss_d: ld, loss_g: lg, l1: scalar(&l1)? / 2.0 });
    }

    let val_l1 = if val.is_empty() { reconstruction_l1(&g, train)? } else { reconstruction_l1(&g, val)? };
    let warning = (val_l1 > pc.val_l1_threshold).then(|| {
        let msg = format!("validation L1 {val_l1:.4} exceeds threshold {}", pc.val_l1_threshold);
        log::warn!("{msg}");
        msg
    });
    Ok((g, d, PretrainHistory { rows, val_l1, warning }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, DatasetConfig, Split};

    fn tiny_cfg(steps: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = DatasetConfig { train: 4, val: 0, test: 0, image_size: 16, ..Default::default() };
        cfg.model.base_width = 8;
        cfg.pretrain.steps = steps;
        cfg.pretrain.batch_size = 2;
        cfg
    }

    #[test]
    fn history_length_and_determinism() {
        let cfg = tiny_cfg(5);
        let ds = generate_split(&cfg.data, Split::Train, 1).unwrap();
        let (g1, _, h1) = pretrain_gan(&ds, &ds, &cfg).unwrap();
        let (g2, _, h2) = pretrain_gan(&ds, &ds, &cfg).unwrap();
        assert_eq!(h1.rows.len(), 5);
        assert_eq!(h1, h2);
        assert_eq!(g1.weight_digest().unwrap(), g2.weight_digest().unwrap());
    }

    #[test]
    fn empty_train_rejected() {
        let cfg = tiny_cfg(1);
        let empty = generate_split(&DatasetConfig { train: 0, ..cfg.data.clone() }, Split::Train, 1).unwrap();
        assert!(pretrain_gan(&empty, &empty, &cfg).is_err());
    }
}
