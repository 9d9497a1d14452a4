//! Python bindings for the core types and operations.

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::Tensor;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use manifold_prune::agents::{gumbel_sigmoid_ste, GumbelDraw};
use manifold_prune::archspec::{build_spec, extract_subnetwork, harden, macs_of, ArchitectureVector};
use manifold_prune::cli::{self, Command, RunDir};
use manifold_prune::config::{EmbeddingSource, RunConfig, SimilarityMode};
use manifold_prune::datagen;
use manifold_prune::evalreport::{frechet_distance, FrechetStats};
use manifold_prune::manifold::{build_index, EmbeddingSet};
use manifold_prune::models::{DiscriminatorConfig, DiscriminatorNet, GeneratorConfig, GeneratorNet};
use manifold_prune::nn::DEVICE;
use manifold_prune::objectives::{resource_loss, sparsity_loss};
use manifold_prune::util::rng_for;
use manifold_prune::Error;

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Lookup(_) => PyValueError::new_err(msg),
        Error::MissingArtifact { .. } => PyFileNotFoundError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    to_py(Error::Tensor(e))
}

/// Validated run configuration.
#[pyclass(name = "RunConfig", module = "manifold_prune_py")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(s) => RunConfig::from_toml_str(s).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    /// Applies a `key=value` override.
    fn set(&mut self, assignment: &str) -> PyResult<()> {
        self.inner.apply_override(assignment).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, p={}, lambda1={}, k={})", self.inner.seed, self.inner.prune.p, self.inner.prune.lambda1, self.inner.index.k)
    }
}

/// One split of the synthetic paired dataset.
#[pyclass(name = "Dataset", module = "manifold_prune_py")]
struct PyDataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<usize> {
        self.inner.ids()
    }

    /// `(source, target)` as nested `H×W×C` lists in `[0, 1]`.
    #[allow(clippy::type_complexity)]
    fn pair(&self, id: usize) -> PyResult<(Vec<Vec<Vec<f32>>>, Vec<Vec<Vec<f32>>>)> {
        let s = self.inner.get(id).map_err(to_py)?;
        let nest = |a: &ndarray::Array3<f32>| -> Vec<Vec<Vec<f32>>> {
            a.outer_iter().map(|row| row.outer_iter().map(|px| px.to_vec()).collect()).collect()
        };
        Ok((nest(&s.source_image), nest(&s.target_image)))
    }

    /// Latent factors as a dict.
    fn factors(&self, id: usize) -> PyResult<BTreeMap<String, f64>> {
        let f = self.inner.get(id).map_err(to_py)?.factors;
        Ok(BTreeMap::from([
            ("shape_class".to_string(), f.shape_class as f64),
            ("hue".to_string(), f.hue),
            ("scale".to_string(), f.scale),
            ("pos_x".to_string(), f.position.0),
            ("pos_y".to_string(), f.position.1),
        ]))
    }

    fn oracle_neighbors(&self, id: usize, k: usize) -> PyResult<Vec<usize>> {
        datagen::oracle_neighbors(&self.inner, id, k).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (config, split="train"))]
fn generate_split(config: &PyRunConfig, split: &str) -> PyResult<PyDataset> {
    let split = match split {
        "train" => datagen::Split::Train,
        "val" => datagen::Split::Val,
        "test" => datagen::Split::Test,
        other => return Err(PyValueError::new_err(format!("unknown split {other}"))),
    };
    let inner = datagen::generate_split(&config.inner.data, split, config.inner.seed).map_err(to_py)?;
    Ok(PyDataset { inner })
}

/// Generator or discriminator with its prunable-channel accounting.
#[pyclass(name = "Network", module = "manifold_prune_py")]
struct PyNetwork {
    gen: Option<GeneratorNet>,
    disc: Option<DiscriminatorNet>,
}

impl PyNetwork {
    fn spec(&self) -> PyResult<manifold_prune::archspec::PrunableSpec> {
        match (&self.gen, &self.disc) {
            (Some(g), _) => build_spec(g),
            (_, Some(d)) => build_spec(d),
            _ => unreachable!("network without a model"),
        }
        .map_err(to_py)
    }
}

#[pymethods]
impl PyNetwork {
    /// Fresh network from a config; `kind` is `generator` or `discriminator`.
    #[staticmethod]
    #[pyo3(signature = (config, kind="generator"))]
    fn init(config: &PyRunConfig, kind: &str) -> PyResult<Self> {
        let c = &config.inner;
        let size = c.data.image_size;
        let mut rng = rng_for(c.seed, &format!("python/{kind}"));
        match kind {
            "generator" => Ok(Self {
                gen: Some(GeneratorNet::new(GeneratorConfig::from_model(&c.model, size), &mut rng).map_err(to_py)?),
                disc: None,
            }),
            "discriminator" => Ok(Self {
                gen: None,
                disc: Some(
                    DiscriminatorNet::new(DiscriminatorConfig::from_model(&c.model, size), &mut rng).map_err(to_py)?,
                ),
            }),
            other => Err(PyValueError::new_err(format!("unknown network kind {other}"))),
        }
    }

    /// Loads a generator or discriminator checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        match GeneratorNet::load(&path, "python") {
            Ok((g, _)) => Ok(Self { gen: Some(g), disc: None }),
            Err(Error::Contract(_)) => {
                Ok(Self { gen: None, disc: Some(DiscriminatorNet::load(&path, "python").map_err(to_py)?.0) })
            }
            Err(e) => Err(to_py(e)),
        }
    }

    #[getter]
    fn kind(&self) -> &'static str {
        if self.gen.is_some() {
            "generator"
        } else {
            "discriminator"
        }
    }

    #[getter]
    fn num_units(&self) -> PyResult<usize> {
        Ok(self.spec()?.num_units())
    }

    #[getter]
    fn t_total(&self) -> PyResult<f64> {
        Ok(self.spec()?.t_total)
    }

    #[getter]
    fn fixed_macs(&self) -> PyResult<f64> {
        Ok(self.spec()?.fixed_macs)
    }

    /// Total MACs of the architecture selected by `v`.
    fn macs(&self, v: Vec<f64>) -> PyResult<f64> {
        macs_of(&self.spec()?, &v).map_err(to_py)
    }

    /// `log(max(prunable MACs, p·t_total) / (p·t_total))`.
    fn resource_loss(&self, v: Vec<f64>, p: f64) -> PyResult<f64> {
        let spec = self.spec()?;
        let t = Tensor::new(v, &DEVICE).map_err(tensor_err)?;
        resource_loss(&spec, &t, p).map_err(to_py)?.to_scalar::<f64>().map_err(tensor_err)
    }

    /// Binary architecture vector from soft values, with the at-least-one guard.
    fn harden(&self, v_soft: Vec<f64>) -> PyResult<Vec<u8>> {
        Ok(harden(&self.spec()?, &v_soft).map_err(to_py)?.bits)
    }

    /// Physically smaller network keeping the channels selected by `bits`.
    fn extract(&self, bits: Vec<u8>) -> PyResult<Self> {
        let spec = self.spec()?;
        let v = ArchitectureVector { bits, owner: spec.owner };
        Ok(match (&self.gen, &self.disc) {
            (Some(g), _) => Self { gen: Some(extract_subnetwork(g, &v).map_err(to_py)?), disc: None },
            (_, Some(d)) => Self { gen: None, disc: Some(extract_subnetwork(d, &v).map_err(to_py)?) },
            _ => unreachable!("network without a model"),
        })
    }

    /// Per-layer JSON table of channel counts and MACs.
    #[pyo3(signature = (bits=None))]
    fn layer_table(&self, bits: Option<Vec<u8>>) -> PyResult<String> {
        let spec = self.spec()?;
        let v = bits.map(|bits| ArchitectureVector { bits, owner: spec.owner });
        Ok(spec.layer_table(v.as_ref()).map_err(to_py)?.to_string())
    }

    fn save(&self, path: PathBuf, seed: u64) -> PyResult<()> {
        match (&self.gen, &self.disc) {
            (Some(g), _) => g.save(&path, seed, 0),
            (_, Some(d)) => d.save(&path, seed, 0),
            _ => unreachable!("network without a model"),
        }
        .map_err(to_py)
    }
}

/// Mean of a discriminator mask.
#[pyfunction]
fn sparsity(v: Vec<f64>) -> PyResult<f64> {
    let t = Tensor::new(v, &DEVICE).map_err(tensor_err)?;
    sparsity_loss(&t).map_err(to_py)?.to_scalar::<f64>().map_err(tensor_err)
}

/// `(v, v_soft)` of the straight-through Gumbel-Sigmoid for logits `o` and noise `g`.
#[pyfunction]
fn gumbel_sigmoid(o: Vec<f64>, g: Vec<f64>, tau: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if o.len() != g.len() {
        return Err(PyValueError::new_err("o and g differ in length"));
    }
    let draw = GumbelDraw::new(Tensor::new(g, &DEVICE).map_err(tensor_err)?, tau).map_err(to_py)?;
    let (v, soft) = gumbel_sigmoid_ste(&Tensor::new(o, &DEVICE).map_err(tensor_err)?, &draw).map_err(to_py)?;
    Ok((v.to_vec1().map_err(tensor_err)?, soft.to_vec1().map_err(tensor_err)?))
}

/// Cosine top-k neighbourhoods: `{id: [(neighbour, similarity), ...]}`.
#[pyfunction]
#[pyo3(signature = (ids, vectors, k, absolute=false))]
fn neighborhoods(
    ids: Vec<usize>,
    vectors: Vec<Vec<f64>>,
    k: usize,
    absolute: bool,
) -> PyResult<BTreeMap<usize, Vec<(usize, f32)>>> {
    let emb = EmbeddingSet::new(ids, vectors, EmbeddingSource::Encoder).map_err(to_py)?;
    let mode = if absolute { SimilarityMode::Absolute } else { SimilarityMode::Signed };
    Ok(build_index(&emb, k, mode).map_err(to_py)?.neighbors)
}

/// Fréchet distance between the Gaussian fits of two feature sets.
#[pyfunction]
fn frechet(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let sa = FrechetStats::from_rows(&a).map_err(to_py)?;
    let sb = FrechetStats::from_rows(&b).map_err(to_py)?;
    frechet_distance(&sa, &sb).map_err(to_py)
}

/// Runs one pipeline stage in `run_dir` and returns the directory it wrote.
#[pyfunction]
fn run_stage(py: Python<'_>, stage: &str, run_dir: PathBuf, config: &PyRunConfig) -> PyResult<PathBuf> {
    let command = match stage {
        "gen-data" => Command::GenData,
        "pretrain" => Command::Pretrain,
        "train-encoder" => Command::TrainEncoder,
        "build-index" => Command::BuildIndex,
        "prune" => Command::Prune,
        "finalize" => Command::Finalize,
        "finetune" => Command::Finetune,
        "eval" => Command::Eval,
        "report" => Command::Report,
        "ablate" => Command::Ablate,
        other => return Err(PyValueError::new_err(format!("unknown stage {other}"))),
    };
    let cfg = config.inner.clone();
    py.allow_threads(move || {
        let rd = RunDir::open(&run_dir)?;
        cli::run_stage(command, &rd, &cfg)
    })
    .map_err(to_py)
}

#[pymodule]
fn manifold_prune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(generate_split, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(neighborhoods, m)?)?;
    m.add_function(wrap_pyfunction!(frechet, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}
