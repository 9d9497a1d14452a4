//! Command-line entry point: one subcommand per pipeline stage.
//!
//! Every stage writes into its own directory under the run directory.
//! A rerun never overwrites: it lands in `<stage>.1`, `<stage>.2`, ...
//! and downstream stages read the newest version.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::archspec::build_spec;
use crate::config::{AblationToggles, EmbeddingSource, RunConfig};
use crate::datagen::{generate_dataset, oracle_neighbor_table, DatasetSplits};
use crate::error::{Error, Result};
use crate::evalreport::{emit_report, eval_generator, AblationRow, EvalResult, NeighborhoodPanel, ReportInputs};
use crate::manifold::{
    embed_predictions, factor_embeddings, index_for_run, load_index, load_predictions, neighborhood_overlap,
    predict_dataset, save_index, save_predictions, NeighborhoodIndex,
};
use crate::models::{pretrain_gan, train_encoder, DiscriminatorNet, EncoderNet, GeneratorNet};
use crate::pruneloop::{
    finalize, finetune, prune, read_history_csv, write_history_csv, FinalizeReport, PruneOptions, PruneRow,
    PruningData, PruningRun,
};
use crate::agents::PruningAgent;

#[derive(Debug, Parser)]
#[command(name = "manifold-prune", version, about = "Joint generator/discriminator channel pruning on a toy paired task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value = "runs/default")]
    pub run_dir: PathBuf,

    /// `key=value` override, repeatable. Bare keys resolve to their unique section.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render the synthetic paired dataset.
    GenData,
    /// Train the original generator and discriminator.
    Pretrain,
    /// Contrastive training of the embedding encoder.
    TrainEncoder,
    /// Predict the train split and build its neighbourhood index.
    BuildIndex,
    /// Train the pruning agents against the frozen networks.
    Prune,
    /// Harden the decisions and extract the subnetworks.
    Finalize,
    /// Finetune the extracted networks.
    Finetune,
    /// Fréchet proxy and L1 on the test split.
    Eval,
    /// Curves, tables and neighbourhood grids under `report/`.
    Report,
    /// Run the ablation ladder and emit the comparison table.
    Ablate,
}

impl Command {
    pub fn stage(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::TrainEncoder => "train-encoder",
            Command::BuildIndex => "build-index",
            Command::Prune => "prune",
            Command::Finalize => "finalize",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Report => "report",
            Command::Ablate => "ablate",
        }
    }
}

/// Resolves file, overrides and `--seed`, in that order.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(Error::Config(format!("config file {} does not exist", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

/// Exclusive handle on a run directory; the lock file is removed on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let lock = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&lock).unwrap_or_default();
                return Err(Error::Contract(format!(
                    "run directory {} is locked by process {} (remove {} if stale)",
                    root.display(),
                    owner.trim(),
                    lock.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self { root: root.to_path_buf(), lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// All existing versions of a stage, oldest first.
    pub fn versions(&self, stage: &str) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let base = self.root.join(stage);
        if base.is_dir() {
            out.push(base);
        }
        for n in 1.. {
            let p = self.root.join(format!("{stage}.{n}"));
            if !p.is_dir() {
                break;
            }
            out.push(p);
        }
        out
    }

    /// Newest completed version of `stage`.
    pub fn latest(&self, stage: &'static str) -> Result<PathBuf> {
        self.versions(stage)
            .pop()
            .ok_or_else(|| Error::MissingArtifact { path: self.root.join(stage), stage })
    }

    /// Builds a new version of `stage` in a scratch directory and publishes it
    /// only when `body` succeeds.
    pub fn write_stage<T>(
        &self,
        stage: &str,
        cfg: &RunConfig,
        body: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<(PathBuf, T)> {
        let n = self.versions(stage).len();
        let target = if n == 0 { self.root.join(stage) } else { self.root.join(format!("{stage}.{n}")) };
        let scratch = self.root.join(format!(".{stage}.partial"));
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        fs::write(scratch.join("config.toml"), cfg.to_toml()?)?;
        let out = body(&scratch)?;
        fs::rename(&scratch, &target)?;
        log::info!("{stage}: wrote {}", target.display());
        Ok((target, out))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, stage })
    }
}

// ---------------------------------------------------------------------------
// Stage bodies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PretrainSummary {
    val_l1: f64,
    warning: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexSummary {
    source: EmbeddingSource,
    k: usize,
    n: usize,
    /// Overlap with the factor-space oracle neighbourhoods.
    oracle_overlap: f64,
    chance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub original: EvalResult,
    pub pruned: EvalResult,
    pub finetuned: Option<EvalResult>,
    pub generator_macs: f64,
    pub compression_ratio: f64,
}

fn load_data(rd: &RunDir) -> Result<DatasetSplits> {
    DatasetSplits::load(&rd.latest("gen-data")?)
}

fn load_pretrained(rd: &RunDir) -> Result<(GeneratorNet, DiscriminatorNet)> {
    let dir = rd.latest("pretrain")?;
    let (g, _) = GeneratorNet::load(&require(dir.join("generator.safetensors"), "pretrain")?, "pretrain")?;
    let (d, _) = DiscriminatorNet::load(&require(dir.join("discriminator.safetensors"), "pretrain")?, "pretrain")?;
    Ok((g, d))
}

fn load_encoder(rd: &RunDir) -> Result<EncoderNet> {
    let dir = rd.latest("train-encoder")?;
    Ok(EncoderNet::load(&require(dir.join("encoder.safetensors"), "train-encoder")?, "train-encoder")?.0)
}

fn load_extracted(rd: &RunDir, stage: &'static str) -> Result<(GeneratorNet, DiscriminatorNet)> {
    let dir = rd.latest(stage)?;
    let (g, _) = GeneratorNet::load(&require(dir.join("generator.safetensors"), stage)?, stage)?;
    let (d, _) = DiscriminatorNet::load(&require(dir.join("discriminator.safetensors"), stage)?, stage)?;
    Ok((g, d))
}

fn save_pair(dir: &Path, g: &GeneratorNet, d: &DiscriminatorNet, seed: u64, step: u64) -> Result<()> {
    g.save(&dir.join("generator.safetensors"), seed, step)?;
    d.save(&dir.join("discriminator.safetensors"), seed, step)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(path, serde_json::to_string_pretty(value)? + "\n")?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T> {
    let p = require(path.to_path_buf(), stage)?;
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

pub fn gen_data(rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    Ok(rd.write_stage("gen-data", cfg, |dir| ds.save(dir))?.0)
}

pub fn run_pretrain(rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_data(rd)?;
    let (g, d, hist) = pretrain_gan(&ds.train, &ds.val, cfg)?;
    let (dir, _) = rd.write_stage("pretrain", cfg, |dir| {
        save_pair(dir, &g, &d, cfg.seed, cfg.pretrain.steps as u64)?;
        write_history_csv(&hist.rows, &dir.join("history.csv"))?;
        write_json(&dir.join("summary.json"), &PretrainSummary { val_l1: hist.val_l1, warning: hist.warning.clone() })
    })?;
    Ok(dir)
}

#[derive(Serialize)]
struct EncoderRow {
    step: usize,
    loss: f64,
}

pub fn run_train_encoder(rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_data(rd)?;
    let (enc, losses) = train_encoder(&ds.train, &cfg.encoder, cfg.model.embedding_dim, cfg.seed)?;
    let rows: Vec<EncoderRow> = losses.iter().enumerate().map(|(step, &loss)| EncoderRow { step, loss }).collect();
    Ok(rd
        .write_stage("train-encoder", cfg, |dir| {
            enc.save(&dir.join("encoder.safetensors"), cfg.seed, cfg.encoder.steps as u64)?;
            write_history_csv(&rows, &dir.join("history.csv"))
        })?
        .0)
}

fn index_with(
    gen: &GeneratorNet,
    ds: &crate::datagen::Dataset,
    enc: Option<&EncoderNet>,
    cfg: &RunConfig,
) -> Result<NeighborhoodIndex> {
    match cfg.index.embedding {
        EmbeddingSource::OracleFactors => index_for_run(&factor_embeddings(ds)?, &cfg.index, None),
        EmbeddingSource::Encoder => {
            let enc = enc.ok_or_else(|| Error::MissingArtifact {
                path: PathBuf::from("train-encoder/encoder.safetensors"),
                stage: "train-encoder",
            })?;
            index_for_run(&embed_predictions(gen, ds, enc)?, &cfg.index, Some(enc))
        }
    }
}

pub fn run_build_index(rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_data(rd)?;
    let (g, _) = load_pretrained(rd)?;
    let enc = match cfg.index.embedding {
        EmbeddingSource::Encoder => Some(load_encoder(rd)?),
        EmbeddingSource::OracleFactors => None,
    };
    let preds = predict_dataset(&g, &ds.train)?;
    let idx = index_with(&g, &ds.train, enc.as_ref(), cfg)?;
    let oracle = oracle_neighbor_table(&ds.train, cfg.index.k)?;
    let summary = IndexSummary {
        source: cfg.index.embedding,
        k: idx.k,
        n: idx.len(),
        oracle_overlap: neighborhood_overlap(&idx, &oracle)?,
        chance: idx.k as f64 / (idx.len() as f64 - 1.0),
    };
    Ok(rd
        .write_stage("build-index", cfg, |dir| {
            save_predictions(&ds.train.ids(), &preds, &dir.join("predictions.npz"))?;
            save_index(&idx, &dir.join("index.bin"))?;
            write_json(&dir.join("summary.json"), &summary)
        })?
        .0)
}

fn prune_with(
    g: &GeneratorNet,
    d: &DiscriminatorNet,
    ds: &DatasetSplits,
    idx: &NeighborhoodIndex,
    preds: &[ndarray::Array3<f32>],
    cfg: &RunConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PruningRun> {
    let data = PruningData::new(&ds.train, preds)?;
    prune(g, d, idx, &data, cfg, PruneOptions { checkpoint_dir, ..Default::default() })
}

fn save_agents(dir: &Path, run: &PruningRun, g: &GeneratorNet, d: &DiscriminatorNet, cfg: &RunConfig) -> Result<()> {
    let step = run.history.len() as u64;
    run.agent_g.save(&dir.join("agent_g.safetensors"), cfg.seed, step, &build_spec(g)?)?;
    if let Some(a) = &run.agent_d {
        a.save(&dir.join("agent_d.safetensors"), cfg.seed, step, &build_spec(d)?)?;
    }
    write_history_csv(&run.history, &dir.join("history.csv"))
}

fn load_index_stage(rd: &RunDir, ids: &[usize]) -> Result<(NeighborhoodIndex, Vec<ndarray::Array3<f32>>)> {
    let dir = rd.latest("build-index")?;
    let idx = load_index(&dir.join("index.bin"))?;
    let (pred_ids, preds) = load_predictions(&require(dir.join("predictions.npz"), "build-index")?)?;
    if pred_ids != ids {
        return Err(Error::Data("stored predictions do not match the train split ids".into()));
    }
    Ok((idx, preds))
}

pub fn run_prune(rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_data(rd)?;
    let (g, d) = load_pretrained(rd)?;
    let (idx, preds) = load_index_stage(rd, &ds.train.ids())?;
    let failures = rd.root().join("prune.failed");
    let run = prune_with(&g, &d, &ds, &idx, &preds, cfg, Some(&failures))?;
    Ok(rd.write_stage("prune", cfg, |dir| save_agents(dir, &run, &g, &d, cfg))?.0)
}

fn load_agents(dir: &Path, g: &GeneratorNet, d: &DiscriminatorNet) -> Result<(PruningAgent, Option<PruningAgent>)> {
    let (a_g, _) = PruningAgent::load(&require(dir.join("agent_g.safetensors"), "prune")?, &build_spec(g)?)?;
    let d_path = dir.join("agent_d.safetensors");
    let a_d = if d_path.exists() { Some(PruningAgent::load(&d_path, &build_spec(d)?)?.0) } else { None };
    Ok((a_g, a_d))
}

pub fn run_finalize(rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    let (g, d) = load_pretrained(rd)?;
    let (a_g, a_d) = load_agents(&rd.latest("prune")?, &g, &d)?;
    let (g2, d2, report) = finalize(&a_g, a_d.as_ref(), &g, &d, cfg)?;
    Ok(rd
        .write_stage("finalize", cfg, |dir| {
            save_pair(dir, &g2, &d2, cfg.seed, 0)?;
            write_json(&dir.join("architecture.json"), &report)
        })?
        .0)
}

pub fn run_finetune(rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_data(rd)?;
    let (teacher, _) = load_pretrained(rd)?;
    let (g, d) = load_extracted(rd, "finalize")?;
    let (g2, d2, rows) = finetune(&g, &d, &teacher, &ds.train, cfg)?;
    Ok(rd
        .write_stage("finetune", cfg, |dir| {
            save_pair(dir, &g2, &d2, cfg.seed, rows.len() as u64)?;
            write_history_csv(&rows, &dir.join("history.csv"))
        })?
        .0)
}

pub fn run_eval(rd: &RunDir, cfg: &RunConfig) -> Result<(PathBuf, EvalSummary)> {
    let ds = load_data(rd)?;
    let enc = load_encoder(rd)?;
    let (g, _) = load_pretrained(rd)?;
    let (pruned, _) = load_extracted(rd, "finalize")?;
    let report: FinalizeReport = read_json(&rd.latest("finalize")?.join("architecture.json"), "finalize")?;
    let finetuned = match rd.latest("finetune") {
        Ok(_) => Some(eval_generator(&load_extracted(rd, "finetune")?.0, &ds.test, &enc)?),
        Err(Error::MissingArtifact { .. }) => None,
        Err(e) => return Err(e),
    };
    let summary = EvalSummary {
        original: eval_generator(&g, &ds.test, &enc)?,
        pruned: eval_generator(&pruned, &ds.test, &enc)?,
        finetuned,
        generator_macs: report.generator.macs,
        compression_ratio: report.generator.compression_ratio,
    };
    let (dir, _) = rd.write_stage("eval", cfg, |dir| write_json(&dir.join("eval.json"), &summary))?;
    Ok((dir, summary))
}

fn run_label(dir: &Path) -> String {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match RunConfig::load(&dir.join("config.toml")) {
        Ok(c) => format!("{name}: lambda1={} p={}", c.prune.lambda1, c.prune.p),
        Err(_) => name,
    }
}

fn panel_for(
    rd: &RunDir,
    cfg: &RunConfig,
    ds: &DatasetSplits,
    missing: &mut Vec<String>,
) -> Result<Option<NeighborhoodPanel>> {
    let (orig_idx, orig_preds) = match rd.latest("build-index") {
        Ok(_) => load_index_stage(rd, &ds.train.ids())?,
        Err(_) => {
            missing.push("build-index/index.bin (run `build-index`)".into());
            return Ok(None);
        }
    };
    let pruned = ["finetune", "finalize"].iter().find_map(|s| load_extracted(rd, s).ok());
    let Some((pruned_g, _)) = pruned else {
        missing.push("finalize/generator.safetensors (run `finalize`)".into());
        return Ok(None);
    };
    let enc = match orig_idx.source {
        EmbeddingSource::Encoder => match load_encoder(rd) {
            Ok(e) => Some(e),
            Err(_) => {
                missing.push("train-encoder/encoder.safetensors (run `train-encoder`)".into());
                return Ok(None);
            }
        },
        EmbeddingSource::OracleFactors => None,
    };
    let mut icfg = cfg.clone();
    icfg.index.k = orig_idx.k;
    icfg.index.embedding = orig_idx.source;
    icfg.index.similarity = orig_idx.similarity;
    let pruned_idx = index_with(&pruned_g, &ds.train, enc.as_ref(), &icfg)?;
    let pruned_preds = predict_dataset(&pruned_g, &ds.train)?;
    let ids = ds.train.ids();
    let centers: Vec<usize> = ids.iter().copied().step_by((ids.len() / 6).max(1)).take(6).collect();
    Ok(Some(NeighborhoodPanel {
        original: orig_idx,
        pruned: pruned_idx,
        original_images: ids.iter().copied().zip(orig_preds).collect(),
        pruned_images: ids.iter().copied().zip(pruned_preds).collect(),
        centers,
    }))
}

pub fn run_report(rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    let mut inputs = ReportInputs::default();
    for dir in rd.versions("prune") {
        inputs.prune_runs.push((run_label(&dir), read_history_csv(&dir.join("history.csv"), "prune")?));
    }
    if inputs.prune_runs.is_empty() {
        inputs.missing.push("prune/history.csv (run `prune`)".into());
    }
    match rd.latest("ablate") {
        Ok(dir) => {
            inputs.ablation = read_history_csv(&dir.join("ablation.csv"), "ablate")?;
            for row in &inputs.ablation {
                let h: Vec<PruneRow> = read_history_csv(&dir.join(slug(&row.name)).join("history.csv"), "ablate")?;
                inputs.ablation_runs.push((row.name.clone(), h));
            }
        }
        Err(_) => inputs.missing.push("ablate/ablation.csv (run `ablate`)".into()),
    }
    match load_data(rd) {
        Ok(ds) => inputs.neighborhoods = panel_for(rd, cfg, &ds, &mut inputs.missing)?,
        Err(_) => inputs.missing.push("gen-data/meta.json (run `gen-data`)".into()),
    }
    Ok(rd
        .write_stage("report", cfg, |dir| {
            emit_report(&inputs, dir)?;
            Ok(())
        })?
        .0)
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

/// Runs prune, finalize, finetune and eval once per ladder row on shared
/// upstream artifacts, building any that are missing.
pub fn run_ablate(rd: &RunDir, cfg: &RunConfig) -> Result<(PathBuf, Vec<AblationRow>)> {
    if rd.latest("gen-data").is_err() {
        gen_data(rd, cfg)?;
    }
    if rd.latest("pretrain").is_err() {
        run_pretrain(rd, cfg)?;
    }
    if rd.latest("train-encoder").is_err() {
        run_train_encoder(rd, cfg)?;
    }
    if rd.latest("build-index").is_err() {
        run_build_index(rd, cfg)?;
    }
    let ds = load_data(rd)?;
    let (g, d) = load_pretrained(rd)?;
    let enc = load_encoder(rd)?;
    let (idx, preds) = load_index_stage(rd, &ds.train.ids())?;

    let mut outputs: BTreeMap<String, (PruningRun, GeneratorNet, DiscriminatorNet, RunConfig)> = BTreeMap::new();
    let mut rows = Vec::new();
    for (name, toggles) in AblationToggles::ladder() {
        log::info!("ablate: {name}");
        let mut c = cfg.clone();
        c.ablation = toggles;
        let run = prune_with(&g, &d, &ds, &idx, &preds, &c, None)?;
        let (g2, d2, report) = finalize(&run.agent_g, run.agent_d.as_ref(), &g, &d, &c)?;
        let (g3, d3, _) = finetune(&g2, &d2, &g, &ds.train, &c)?;
        let ev = eval_generator(&g3, &ds.test, &enc)?;
        rows.push(AblationRow {
            name: name.to_string(),
            prune_d: toggles.prune_d,
            use_agents: toggles.use_agents,
            exchange_feedback: toggles.exchange_feedback,
            manifold_real_set: toggles.manifold_real_set,
            use_kd: toggles.use_kd,
            generator_macs: report.generator.macs,
            compression_ratio: report.generator.compression_ratio,
            frechet: ev.frechet,
            l1: ev.l1,
        });
        outputs.insert(name.to_string(), (run, g3, d3, c));
    }
    let (dir, _) = rd.write_stage("ablate", cfg, |dir| {
        for (name, (run, g3, d3, c)) in &outputs {
            let sub = dir.join(slug(name));
            fs::create_dir_all(&sub)?;
            fs::write(sub.join("config.toml"), c.to_toml()?)?;
            save_agents(&sub, run, &g, &d, c)?;
            save_pair(&sub, g3, d3, c.seed, 0)?;
        }
        crate::evalreport::write_ablation(&rows, dir)
    })?;
    Ok((dir, rows))
}

/// Executes one subcommand against an already-locked run directory.
pub fn run_stage(command: Command, rd: &RunDir, cfg: &RunConfig) -> Result<PathBuf> {
    match command {
        Command::GenData => gen_data(rd, cfg),
        Command::Pretrain => run_pretrain(rd, cfg),
        Command::TrainEncoder => run_train_encoder(rd, cfg),
        Command::BuildIndex => run_build_index(rd, cfg),
        Command::Prune => run_prune(rd, cfg),
        Command::Finalize => run_finalize(rd, cfg),
        Command::Finetune => run_finetune(rd, cfg),
        Command::Eval => Ok(run_eval(rd, cfg)?.0),
        Command::Report => run_report(rd, cfg),
        Command::Ablate => Ok(run_ablate(rd, cfg)?.0),
    }
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    let rd = RunDir::open(&cli.run_dir)?;
    run_stage(cli.command, &rd, &cfg)
}

/// Single-line, tab-separated error record: `error<TAB>kind<TAB>stage<TAB>message`.
pub fn error_line(command: Command, e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\t'], " ");
    format!("error\t{}\t{}\t{}", e.kind(), command.stage(), msg)
}

/// Process entry point; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(cli.command, &e));
            1
        }
    }
}
