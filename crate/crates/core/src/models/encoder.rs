//! Self-supervised image encoder used to find manifold neighbourhoods.

use std::path::Path;

use candle_core::{DType, Tensor, Var, D};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{check_range, images_to_tensor, PixelRange};
use crate::config::EncoderTrainConfig;
use crate::datagen::{flip_horizontal, Dataset};
use crate::error::{contract, Error, Result};
use crate::nn::{self, normal_tensor, scalar, uniform_tensor, Adam, CheckpointMeta, Module, DEVICE};
use crate::util::rng_for;

/// Embedding variance below which training is declared collapsed.
pub const COLLAPSE_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub embedding_dim: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl EncoderConfig {
    pub fn new(embedding_dim: usize, image_size: usize) -> Self {
        Self { widths: vec![16, 32, 64, 64], hidden: 128, embedding_dim, image_size, channels: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub config: EncoderConfig,
    convs: Vec<(Var, Var)>,
    proj: Vec<(Var, Var)>,
}

impl EncoderNet {
    pub fn new(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = config.channels;
        for &w in &config.widths {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            convs.push((
                Var::from_tensor(&normal_tensor(rng, &[w, cin, 3, 3], 0.0, std)?)?,
                Var::zeros(w, DType::F32, &DEVICE)?,
            ));
            cin = w;
        }
        let mut proj = Vec::new();
        for (i, o) in [(cin, config.hidden), (config.hidden, config.embedding_dim)] {
            let bound = 1.0 / (i as f64).sqrt();
            proj.push((
                Var::from_tensor(&uniform_tensor(rng, &[o, i], bound)?)?,
                Var::from_tensor(&uniform_tensor(rng, &[o], bound)?)?,
            ));
        }
        Ok(Self { config, convs, proj })
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(config: EncoderConfig) -> Result<Self> {
        let mut rng = rng_for(0, "zeroed-encoder");
        let e = Self::new(config, &mut rng)?;
        for v in e.vars() {
            v.set(&v.zeros_like()?)?;
        }
        Ok(e)
    }

    /// Embeds an N×C×H×W batch with pixels in `[0, 1]`; returns N×d.
    pub fn embed(&self, y: &Tensor) -> Result<Tensor> {
        check_range(y, 0.0, 1.0, "encoder")?;
        let mut h = y.clone();
        for (w, b) in &self.convs {
            let c = w.dims()[0];
            h = h.conv2d(w.as_tensor(), 1, 2, 1, 1)?.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?.relu()?;
        }
        let mut z = h.mean(D::Minus1)?.mean(D::Minus1)?;
        for (i, (w, b)) in self.proj.iter().enumerate() {
            z = z.matmul(&w.as_tensor().t()?)?.broadcast_add(b.as_tensor())?;
            if i + 1 < self.proj.len() {
                z = z.relu()?;
            }
        }
        Ok(z)
    }

    /// Embeddings of many `[0, 1]` images as f64 rows, batched.
    pub fn embed_images(&self, images: &[&Array3<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let t = images_to_tensor(chunk, PixelRange::Unit)?;
            let z = self.embed(&t)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            rows.extend(z);
        }
        Ok(rows)
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "encoder".into(),
            config: serde_json::to_string(&self.config)?,
            seed,
            step,
            extra: Default::default(),
        };
        let tensors: Vec<(String, Tensor)> =
            self.named_vars().into_iter().map(|(n, v)| (n, v.as_tensor().clone())).collect();
        nn::save_checkpoint(path, &tensors, &meta)
    }

    pub fn load(path: &Path, stage: &'static str) -> Result<(Self, CheckpointMeta)> {
        let (mut map, meta) = nn::load_checkpoint(path, stage)?;
        if meta.kind != "encoder" {
            return contract(format!("{} is a {} checkpoint, not an encoder", path.display(), meta.kind));
        }
        let config: EncoderConfig = serde_json::from_str(&meta.config)?;
        let e = Self::zeroed(config)?;
        for (name, v) in e.named_vars() {
            let t = nn::take(&mut map, &name)?;
            if t.dims() != v.dims() {
                return contract(format!("{name} has shape {:?}, expected {:?}", t.dims(), v.dims()));
            }
            v.set(&t)?;
        }
        Ok((e, meta))
    }
}

impl Module for EncoderNet {
    fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), w.clone()));
            out.push((format!("conv{i}.bias"), b.clone()));
        }
        for (i, (w, b)) in self.proj.iter().enumerate() {
            out.push((format!("proj{i}.weight"), w.clone()));
            out.push((format!("proj{i}.bias"), b.clone()));
        }
        out
    }
}

/// `encoder_embed` for a single H×W×C image in `[0, 1]`.
pub fn encoder_embed(e: &EncoderNet, y: &Array3<f32>) -> Result<Vec<f64>> {
    Ok(e.embed_images(&[y])?.remove(0))
}

/// Random shift (±2 px), horizontal flip and brightness jitter.
pub fn augment(img: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let dx: i64 = rng.random_range(-2..=2);
    let dy: i64 = rng.random_range(-2..=2);
    let gain: f32 = rng.random_range(0.8..1.2);
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (sy, sx) = (y - dy, x - dx);
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                continue;
            }
            for ch in 0..c {
                out[[y as usize, x as usize, ch]] = (img[[sy as usize, sx as usize, ch]] * gain).min(1.0);
            }
        }
    }
    if rng.random::<bool>() {
        out = flip_horizontal(out.view());
    }
    out
}

/// NT-Xent over 2B embeddings where rows i and i+B are positives.
pub fn nt_xent(z: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, _) = z.dims2()?;
    if n % 2 != 0 || n < 4 {
        return contract("nt_xent needs an even batch of at least 4 views");
    }
    let b = n / 2;
    let norm = z.sqr()?.sum_keepdim(1)?.sqrt()?.affine(1.0, 1e-12)?;
    let zn = z.broadcast_div(&norm)?;
    let sim = (zn.matmul(&zn.t()?)? / temperature)?;
    let eye = Tensor::eye(n, z.dtype(), &DEVICE)?;
    let sim = (sim - (eye * 1e9)?)?;
    let max = sim.max_keepdim(1)?.detach();
    let lse = sim.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()?.broadcast_add(&max)?;
    let pos_idx: Vec<u32> = (0..n).map(|i| ((i + b) % n) as u32).collect();
    let pos_idx = Tensor::new(pos_idx.as_slice(), &DEVICE)?.reshape((n, 1))?;
    let pos = sim.gather(&pos_idx, 1)?;
    Ok((lse - pos)?.mean_all()?)
}

/// Mean per-dimension variance of embeddings; errors below [`COLLAPSE_VARIANCE`].
pub fn collapse_check(e: &EncoderNet, images: &[&Array3<f32>]) -> Result<f64> {
    let rows = e.embed_images(images)?;
    if rows.len() < 2 {
        return contract("collapse check needs at least two images");
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        total += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    let var = total / d as f64;
    if var < COLLAPSE_VARIANCE || !var.is_finite() {
        return Err(Error::Divergence(format!("encoder collapsed: embedding variance {var:.3e}")));
    }
    Ok(var)
}

/// Contrastive training on the dataset's target images.
pub fn train_encoder(
    ds: &Dataset,
    cfg: &EncoderTrainConfig,
    embedding_dim: usize,
    seed: u64,
) -> Result<(EncoderNet, Vec<f64>)> {
    if ds.len() < 2 {
        return contract("encoder training needs at least two target images");
    }
    let mut init_rng = rng_for(seed, "encoder/init");
    let mut rng = rng_for(seed, "encoder/train");
    let enc = EncoderNet::new(EncoderConfig::new(embedding_dim, ds.image_size), &mut init_rng)?;
    let mut opt = Adam::new(enc.vars(), cfg.adam)?;
    let batch = cfg.batch_size.clamp(2, ds.len());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = rand::seq::index::sample(&mut rng, ds.len(), batch).into_vec();
        let mut views = Vec::with_capacity(2 * batch);
        for _ in 0..2 {
            for &i in &picks {
                views.push(augment(&ds.samples[i].target_image, &mut rng));
            }
        }
        let refs: Vec<&Array3<f32>> = views.iter().collect();
        let x = images_to_tensor(&refs, PixelRange::Unit)?;
        let loss = nt_xent(&enc.embed(&x)?, cfg.temperature)?;
        let l = scalar(&loss)?;
        if !l.is_finite() {
            return Err(Error::Divergence(format!("encoder loss became {l} at step {step}")));
        }
        opt.backward_step(&loss)?;
        history.push(l);
    }
    let targets: Vec<&Array3<f32>> = ds.samples.iter().map(|s| &s.target_image).collect();
    collapse_check(&enc, &targets)?;
    Ok((enc, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, DatasetConfig, Split};

    #[test]
    fn embeddings_are_deterministic_with_configured_length() {
        let e = EncoderNet::new(EncoderConfig::new(64, 32), &mut rng_for(0, "enc")).unwrap();
        let img = Array3::from_elem((32, 32, 3), 0.3f32);
        let a = encoder_embed(&e, &img).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, encoder_embed(&e, &img.clone()).unwrap());
        let bad = Array3::from_elem((32, 32, 3), f32::NAN);
        assert!(matches!(encoder_embed(&e, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn collapse_guard_fires_on_zero_weights() {
        let cfg = DatasetConfig { train: 8, ..Default::default() };
        let ds = generate_split(&cfg, Split::Train, 1).unwrap();
        let imgs: Vec<&Array3<f32>> = ds.samples.iter().map(|s| &s.target_image).collect();
        let e = EncoderNet::zeroed(EncoderConfig::new(16, 32)).unwrap();
        assert!(matches!(collapse_check(&e, &imgs), Err(Error::Divergence(_))));
    }

    #[test]
    fn nt_xent_prefers_aligned_pairs() {
        let aligned = Tensor::new(&[[1f32, 0.], [0., 1.], [1., 0.], [0., 1.]], &DEVICE).unwrap();
        let crossed = Tensor::new(&[[1f32, 0.], [0., 1.], [0., 1.], [1., 0.]], &DEVICE).unwrap();
        let a = scalar(&nt_xent(&aligned, 0.1).unwrap()).unwrap();
        let c = scalar(&nt_xent(&crossed, 0.1).unwrap()).unwrap();
        assert!(a < c);
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let e = EncoderNet::new(EncoderConfig::new(8, 16), &mut rng_for(1, "enc")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.safetensors");
        e.save(&p, 3, 4).unwrap();
        let (back, _) = EncoderNet::load(&p, "train-encoder").unwrap();
        assert_eq!(back.weight_digest().unwrap(), e.weight_digest().unwrap());
    }
}
