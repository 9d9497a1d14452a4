//! The single validated run configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetConfig;
use crate::error::{config, Error, Result};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanFlavor {
    Hinge,
    Lsgan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorStyle {
    Unet,
    Resnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Plain cosine similarity.
    Signed,
    /// Absolute value of the cosine.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    Encoder,
    OracleFactors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub style: GeneratorStyle,
    pub base_width: usize,
    /// Down/up levels of the U-Net.
    pub depth: usize,
    /// Residual blocks of the ResNet generator.
    pub n_blocks: usize,
    pub dropout_rate: f64,
    pub disc_depth: usize,
    pub disc_width: usize,
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            style: GeneratorStyle::Unet,
            base_width: 16,
            depth: 3,
            n_blocks: 4,
            dropout_rate: 0.5,
            disc_depth: 3,
            disc_width: 16,
            embedding_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lambda_rec: f64,
    /// Warn when the final validation L1 (in `[0, 1]` pixel units) exceeds this.
    pub val_l1_threshold: f64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            lambda_rec: 100.0,
            val_l1_threshold: 0.1,
            adam: AdamConfig { lr: 2e-3, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub adam: AdamConfig,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 64,
            temperature: 0.1,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub k: usize,
    pub include_center: bool,
    pub similarity: SimilarityMode,
    pub embedding: EmbeddingSource,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            k: 5,
            include_center: true,
            similarity: SimilarityMode::Signed,
            embedding: EmbeddingSource::Encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// MAC budget as a fraction of the total prunable MACs.
    pub p: f64,
    pub tau: f64,
    /// When set, τ is annealed linearly from `tau` to this value.
    pub tau_final: Option<f64>,
    pub epochs: usize,
    /// Initial bias of every logit head; negative means "keep" at start.
    pub head_bias_init: f64,
    pub agent_input_dim: usize,
    pub agent_hidden_dim: usize,
    pub adam: AdamConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            lambda1: 3.0,
            lambda2: 0.1,
            p: 0.5,
            tau: 1.0,
            tau_final: None,
            epochs: 2,
            head_bias_init: -2.0,
            agent_input_dim: 128,
            agent_hidden_dim: 256,
            adam: AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_rec: f64,
    pub lambda_content: f64,
    pub lambda_texture: f64,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 8,
            lambda_rec: 100.0,
            lambda_content: 0.05,
            lambda_texture: 10.0,
            adam: AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        }
    }
}

/// Mechanisms that the ablation ladder switches on one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationToggles {
    pub prune_d: bool,
    pub use_agents: bool,
    pub exchange_feedback: bool,
    pub manifold_real_set: bool,
    pub use_kd: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationToggles {
    pub const fn baseline() -> Self {
        Self {
            prune_d: false,
            use_agents: false,
            exchange_feedback: false,
            manifold_real_set: false,
            use_kd: false,
        }
    }

    pub const fn full() -> Self {
        Self {
            prune_d: true,
            use_agents: true,
            exchange_feedback: true,
            manifold_real_set: true,
            use_kd: true,
        }
    }

    /// The cumulative ladder: Baseline, +D pruning, +agents, +feedback,
    /// +manifold real set, +distillation.
    pub fn ladder() -> Vec<(&'static str, Self)> {
        let mut t = Self::baseline();
        let mut rows = vec![("Baseline", t)];
        t.prune_d = true;
        rows.push(("+ D pruning", t));
        t.use_agents = true;
        rows.push(("+ Pruning agents", t));
        t.exchange_feedback = true;
        rows.push(("+ G<->D feedback", t));
        t.manifold_real_set = true;
        rows.push(("+ Manifold pruning", t));
        t.use_kd = true;
        rows.push(("+ Knowledge distillation", t));
        rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.exchange_feedback && !self.use_agents {
            return config("exchange_feedback requires use_agents");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stochastic stage derives its stream from it.
    pub seed: u64,
    pub flavor: GanFlavor,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub encoder: EncoderTrainConfig,
    pub index: IndexConfig,
    pub prune: PruneConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationToggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            flavor: GanFlavor::Hinge,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            encoder: EncoderTrainConfig::default(),
            index: IndexConfig::default(),
            prune: PruneConfig::default(),
            finetune: FinetuneConfig::default(),
            ablation: AblationToggles::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return config(format!("seed {} does not fit a TOML integer", self.seed));
        }
        self.data.validate()?;
        self.ablation.validate()?;
        let p = &self.prune;
        if p.lambda1 < 0.0 || p.lambda2 < 0.0 {
            return config("lambda1 and lambda2 must be non-negative");
        }
        if !(p.p > 0.0 && p.p <= 1.0) {
            return config(format!("p must lie in (0, 1], got {}", p.p));
        }
        if p.tau <= 0.0 || p.tau_final.is_some_and(|t| t <= 0.0) {
            return config("tau must be positive");
        }
        if self.index.k == 0 {
            return config("k must be at least 1");
        }
        if self.data.train > 0 && self.index.k >= self.data.train {
            return config(format!(
                "k = {} must be smaller than the training split ({})",
                self.index.k, self.data.train
            ));
        }
        let m = &self.model;
        if !(0.0..1.0).contains(&m.dropout_rate) {
            return config("dropout_rate must lie in [0, 1)");
        }
        if m.base_width == 0 || m.disc_width == 0 || m.depth == 0 || m.disc_depth == 0 {
            return config("model widths and depths must be positive");
        }
        let levels = match m.style {
            GeneratorStyle::Unet => m.depth,
            GeneratorStyle::Resnet => 2,
        };
        if self.data.image_size % (1 << levels) != 0 || self.data.image_size % (1 << m.disc_depth) != 0 {
            return config(format!(
                "image_size {} is not divisible by the networks' total stride",
                self.data.image_size
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies a `section.key=value` (or top-level `key=value`) override.
    ///
    /// A bare key is looked up in every section and must be unambiguous;
    /// `lambda1=4.0` therefore resolves to `prune.lambda1`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut doc = toml::Value::try_from(&*self)?;
        let table = doc.as_table_mut().expect("config serializes to a table");

        let path: Vec<String> = if key.contains('.') {
            key.split('.').map(str::to_string).collect()
        } else if table.contains_key(key) {
            vec![key.to_string()]
        } else {
            let hits: Vec<String> = table
                .iter()
                .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
                .map(|(s, _)| s.clone())
                .collect();
            match hits.as_slice() {
                [section] => vec![section.clone(), key.to_string()],
                [] => return config(format!("unknown config key `{key}`")),
                _ => return config(format!("ambiguous key `{key}`, qualify it: {hits:?}")),
            }
        };

        let mut cursor = &mut *table;
        for (i, part) in path.iter().enumerate() {
            if i + 1 == path.len() {
                let slot = cursor
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
                *slot = coerce(slot, value.clone())?;
            } else {
                cursor = cursor
                    .get_mut(part)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::Config(format!("unknown config section in `{key}`")))?;
            }
        }
        let updated: RunConfig = doc.try_into()?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Keeps integer-typed slots integral and lets `3` stand for `3.0`.
fn coerce(slot: &toml::Value, v: toml::Value) -> Result<toml::Value> {
    use toml::Value as V;
    Ok(match (slot, v) {
        (V::Float(_), V::Integer(i)) => V::Float(i as f64),
        (_, v) => v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.prune.lambda1, 3.0);
        assert_eq!(c.prune.lambda2, 0.1);
        assert_eq!(c.index.k, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[prune]\nlambda3 = 1.0").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_override("nonsense=1").is_err());
    }

    #[test]
    fn override_bare_and_qualified_keys() {
        let mut c = RunConfig::default();
        c.apply_override("lambda1=4.0").unwrap();
        assert_eq!(c.prune.lambda1, 4.0);
        c.apply_override("prune.p=0.25").unwrap();
        assert_eq!(c.prune.p, 0.25);
        c.apply_override("lambda2=1").unwrap();
        assert_eq!(c.prune.lambda2, 1.0);
        c.apply_override("flavor=lsgan").unwrap();
        assert_eq!(c.flavor, GanFlavor::Lsgan);
        c.apply_override("ablation.use_kd=false").unwrap();
        assert!(!c.ablation.use_kd);
        // `batch_size` lives in several sections.
        assert!(c.apply_override("batch_size=2").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_override("p=0").is_err());
        assert!(c.apply_override("lambda1=-1").is_err());
        assert!(c.apply_override("k=10000").is_err());
        c.ablation = AblationToggles { use_agents: false, ..AblationToggles::full() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ladder_adds_one_mechanism_per_row() {
        let rows = AblationToggles::ladder();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].1, AblationToggles::baseline());
        assert_eq!(rows[5].1, AblationToggles::full());
        for (_, t) in rows {
            t.validate().unwrap();
        }
    }
}
