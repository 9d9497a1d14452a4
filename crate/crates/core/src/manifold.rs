//! Neighbourhoods on the output manifold of the original generator.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use ndarray_npy::{NpzReader, NpzWriter};
use serde::{Deserialize, Serialize};

use crate::config::{EmbeddingSource, SimilarityMode};
use crate::datagen::{factor_embedding, Dataset};
use crate::error::{config, contract, Error, Result};
use crate::models::{images_to_tensor, tensor_to_images, EncoderNet, GeneratorNet, PixelRange};
use crate::nn::Module;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub source: EmbeddingSource,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<usize>, vectors: Vec<Vec<f64>>, source: EmbeddingSource) -> Result<Self> {
        if ids.len() != vectors.len() {
            return contract("embedding ids and vectors differ in length");
        }
        let d = vectors.first().map_or(0, Vec::len);
        for (id, v) in ids.iter().zip(&vectors) {
            if v.len() != d {
                return contract("embedding vectors differ in dimension");
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!("non-finite embedding for sample {id}")));
            }
        }
        Ok(Self { ids, vectors, source })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Signed cosine similarity.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return contract("cosine of vectors with different lengths");
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return contract("cosine similarity of a zero vector");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodIndex {
    pub k: usize,
    pub include_center: bool,
    pub source: EmbeddingSource,
    pub similarity: SimilarityMode,
    /// Encoder weight digest, empty for oracle-factor embeddings.
    pub encoder_checksum: String,
    /// Centre id to `k` (neighbour id, similarity) pairs, best first.
    pub neighbors: BTreeMap<usize, Vec<(usize, f32)>>,
}

impl NeighborhoodIndex {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors_of(&self, id: usize) -> Result<&[(usize, f32)]> {
        self.neighbors
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no neighbours recorded for sample {id}")))
    }

    pub fn neighbor_ids(&self, id: usize) -> Result<Vec<usize>> {
        Ok(self.neighbors_of(id)?.iter().map(|&(j, _)| j).collect())
    }

    pub fn id_lists(&self) -> BTreeMap<usize, Vec<usize>> {
        self.neighbors.iter().map(|(&i, l)| (i, l.iter().map(|&(j, _)| j).collect())).collect()
    }
}

/// Exact top-`k` by cosine similarity; ties go to the lower id.
pub fn build_index(emb: &EmbeddingSet, k: usize, similarity: SimilarityMode) -> Result<NeighborhoodIndex> {
    let n = emb.len();
    if k == 0 || k >= n {
        return config(format!("k = {k} must satisfy 1 <= k < N = {n}"));
    }
    let unit: Vec<Vec<f64>> = emb
        .vectors
        .iter()
        .zip(&emb.ids)
        .map(|(v, id)| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return contract(format!("zero embedding for sample {id}"));
            }
            Ok(v.iter().map(|x| x / norm).collect())
        })
        .collect::<Result<_>>()?;
    let mut neighbors = BTreeMap::new();
    for i in 0..n {
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let c = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
                let s = match similarity {
                    SimilarityMode::Signed => c,
                    SimilarityMode::Absolute => c.abs(),
                };
                (s, emb.ids[j])
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        neighbors.insert(emb.ids[i], scored.into_iter().take(k).map(|(s, j)| (j, s as f32)).collect());
    }
    Ok(NeighborhoodIndex {
        k,
        include_center: true,
        source: emb.source,
        similarity,
        encoder_checksum: String::new(),
        neighbors,
    })
}

/// Mean over centres of `|idx ∩ oracle| / k`.
pub fn neighborhood_overlap(idx: &NeighborhoodIndex, oracle: &BTreeMap<usize, Vec<usize>>) -> Result<f64> {
    if idx.is_empty() {
        return contract("overlap of an empty index");
    }
    let mut total = 0.0;
    for (id, list) in &idx.neighbors {
        let o = oracle.get(id).ok_or_else(|| Error::Lookup(format!("oracle has no entry for id {id}")))?;
        if o.len() != idx.k {
            return contract(format!("oracle k = {} differs from index k = {}", o.len(), idx.k));
        }
        let hits = list.iter().filter(|(j, _)| o.contains(j)).count();
        total += hits as f64 / idx.k as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Deterministic predictions `y' = G(x)` in `[0, 1]`, no dropout, running norm stats.
pub fn predict_dataset(gen: &GeneratorNet, ds: &Dataset) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(64) {
        let x: Vec<&Array3<f32>> = chunk.iter().map(|s| &s.source_image).collect();
        let y = gen.forward(&images_to_tensor(&x, PixelRange::Signed)?, None, None)?;
        out.extend(tensor_to_images(&y, PixelRange::Signed)?);
    }
    Ok(out)
}

pub fn embed_images(enc: &EncoderNet, ids: Vec<usize>, images: &[Array3<f32>]) -> Result<EmbeddingSet> {
    let refs: Vec<&Array3<f32>> = images.iter().collect();
    EmbeddingSet::new(ids, enc.embed_images(&refs)?, EmbeddingSource::Encoder)
}

/// Encoder embeddings of the original generator's predictions on `ds`.
pub fn embed_predictions(gen: &GeneratorNet, ds: &Dataset, enc: &EncoderNet) -> Result<EmbeddingSet> {
    embed_images(enc, ds.ids(), &predict_dataset(gen, ds)?)
}

/// Factor-space embeddings whose cosine ranking matches the factor metric.
pub fn factor_embeddings(ds: &Dataset) -> Result<EmbeddingSet> {
    EmbeddingSet::new(
        ds.ids(),
        ds.samples.iter().map(|s| factor_embedding(&s.factors, &ds.factor_ranges)).collect(),
        EmbeddingSource::OracleFactors,
    )
}

/// Builds the index configured for a run and stamps provenance fields.
pub fn index_for_run(
    emb: &EmbeddingSet,
    cfg: &crate::config::IndexConfig,
    encoder: Option<&EncoderNet>,
) -> Result<NeighborhoodIndex> {
    let mut idx = build_index(emb, cfg.k, cfg.similarity)?;
    idx.include_center = cfg.include_center;
    idx.encoder_checksum = encoder.map(|e| e.weight_digest()).transpose()?.unwrap_or_default();
    Ok(idx)
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    k: usize,
    n: usize,
    source: EmbeddingSource,
    similarity: SimilarityMode,
    include_center: bool,
    encoder_checksum: String,
}

/// JSON header line followed by little-endian records
/// `center u32, k × (neighbour u32, similarity f32)`.
pub fn save_index(idx: &NeighborhoodIndex, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = IndexHeader {
        k: idx.k,
        n: idx.len(),
        source: idx.source,
        similarity: idx.similarity,
        include_center: idx.include_center,
        encoder_checksum: idx.encoder_checksum.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (&c, list) in &idx.neighbors {
        w.write_all(&(c as u32).to_le_bytes())?;
        for &(j, s) in list {
            w.write_all(&(j as u32).to_le_bytes())?;
            w.write_all(&s.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<NeighborhoodIndex> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), stage: "build-index" });
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let h: IndexHeader = serde_json::from_str(line.trim_end())?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let rec = 4 + 8 * h.k;
    if body.len() != rec * h.n {
        return Err(Error::Data(format!("index body has {} bytes, expected {}", body.len(), rec * h.n)));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
    let neighbors = (0..h.n)
        .map(|i| {
            let o = i * rec;
            (u32_at(o), (0..h.k).map(|j| (u32_at(o + 4 + 8 * j), f32_at(o + 8 + 8 * j))).collect())
        })
        .collect();
    Ok(NeighborhoodIndex {
        k: h.k,
        include_center: h.include_center,
        source: h.source,
        similarity: h.similarity,
        encoder_checksum: h.encoder_checksum,
        neighbors,
    })
}

/// Cached predictions `D'_y` as an npz with `ids` and `images` (N×H×W×C).
pub fn save_predictions(ids: &[usize], images: &[Array3<f32>], path: &Path) -> Result<()> {
    let Some(first) = images.first() else {
        return contract("no predictions to save");
    };
    let (h, w, c) = first.dim();
    let mut stack = Array4::<f32>::zeros((images.len(), h, w, c));
    for (mut slot, img) in stack.axis_iter_mut(Axis(0)).zip(images) {
        slot.assign(img);
    }
    let idv = ndarray::Array1::from_iter(ids.iter().map(|&i| i as u64));
    let mut npz = NpzWriter::new_compressed(File::create(path)?);
    npz.add_array("ids", &idv)?;
    npz.add_array("images", &stack)?;
    npz.finish()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<(Vec<usize>, Vec<Array3<f32>>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), stage: "build-index" });
    }
    let mut npz = NpzReader::new(File::open(path)?)?;
    let ids: ndarray::Array1<u64> = npz.by_name("ids")?;
    let images: Array4<f32> = npz.by_name("images")?;
    Ok((
        ids.iter().map(|&i| i as usize).collect(),
        images.axis_iter(Axis(0)).map(|v| v.to_owned()).collect(),
    ))
}

/// Id-to-position lookup for prediction caches.
pub fn position_map(ids: &[usize]) -> HashMap<usize, usize> {
    ids.iter().enumerate().map(|(p, &i)| (i, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn set(vs: Vec<Vec<f64>>) -> EmbeddingSet {
        EmbeddingSet::new((0..vs.len()).collect(), vs, EmbeddingSource::Encoder).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.5f64.sqrt(), epsilon = 1e-6);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn small_index_and_errors() {
        let n = (0.99f64.powi(2) + 0.01).sqrt();
        let e = set(vec![vec![1.0, 0.0], vec![0.99 / n, 0.1 / n], vec![0.0, 1.0]]);
        let idx = build_index(&e, 1, SimilarityMode::Signed).unwrap();
        assert_eq!(idx.neighbor_ids(0).unwrap(), vec![1]);
        let full = build_index(&e, 2, SimilarityMode::Signed).unwrap();
        assert_eq!(full.neighbor_ids(0).unwrap(), vec![1, 2]);
        assert!(matches!(build_index(&e, 3, SimilarityMode::Signed), Err(Error::Config(_))));
        assert!(matches!(idx.neighbors_of(9), Err(Error::Data(_))));
    }

    #[test]
    fn absolute_mode_ranks_antiparallel_first() {
        let e = set(vec![vec![1.0, 0.0], vec![-1.0, 0.01], vec![0.6, 0.8]]);
        assert_eq!(build_index(&e, 1, SimilarityMode::Signed).unwrap().neighbor_ids(0).unwrap(), vec![2]);
        assert_eq!(build_index(&e, 1, SimilarityMode::Absolute).unwrap().neighbor_ids(0).unwrap(), vec![1]);
    }

    #[test]
    fn ties_break_to_lower_id() {
        let e = set(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 3.0]]);
        let idx = build_index(&e, 2, SimilarityMode::Signed).unwrap();
        assert_eq!(idx.neighbor_ids(0).unwrap(), vec![1, 2]);
        assert_eq!(idx.neighbor_ids(3).unwrap(), vec![1, 2]);
    }

    #[test]
    fn overlap_examples() {
        let mut rng = crate::util::rng_for(1, "ov");
        let e = set((0..30).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect());
        let idx = build_index(&e, 3, SimilarityMode::Signed).unwrap();
        assert_eq!(neighborhood_overlap(&idx, &idx.id_lists()).unwrap(), 1.0);
        let disjoint: BTreeMap<usize, Vec<usize>> = idx
            .id_lists()
            .into_iter()
            .map(|(i, l)| (i, (0..30).filter(|j| *j != i && !l.contains(j)).take(3).collect()))
            .collect();
        assert_eq!(neighborhood_overlap(&idx, &disjoint).unwrap(), 0.0);
        let short: BTreeMap<usize, Vec<usize>> = idx.id_lists().into_iter().map(|(i, l)| (i, l[..2].to_vec())).collect();
        assert!(matches!(neighborhood_overlap(&idx, &short), Err(Error::Contract(_))));
    }

    #[test]
    fn index_file_round_trip() {
        let mut rng = crate::util::rng_for(2, "file");
        let e = set((0..12).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect());
        let mut idx = build_index(&e, 4, SimilarityMode::Signed).unwrap();
        idx.encoder_checksum = "abc".into();
        idx.include_center = false;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.bin");
        save_index(&idx, &p).unwrap();
        assert_eq!(load_index(&p).unwrap(), idx);
        assert!(matches!(load_index(&dir.path().join("none")), Err(Error::MissingArtifact { .. })));
    }

    #[test]
    fn predictions_round_trip() {
        let imgs = vec![Array3::from_elem((4, 4, 3), 0.25f32), Array3::from_elem((4, 4, 3), 0.75f32)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.npz");
        save_predictions(&[7, 9], &imgs, &p).unwrap();
        let (ids, back) = load_predictions(&p).unwrap();
        assert_eq!(ids, vec![7, 9]);
        assert_eq!(back, imgs);
    }

    #[test]
    fn non_finite_embedding_names_sample() {
        let err = EmbeddingSet::new(vec![4, 5], vec![vec![1.0], vec![f64::NAN]], EmbeddingSource::Encoder).unwrap_err();
        assert!(err.to_string().contains('5'));
    }
}
