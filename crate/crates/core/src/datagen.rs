//! Synthetic paired image-translation data with known latent factors.
//!
//! Each sample is a shape (circle, square or triangle) described by a
//! [`LatentFactors`] record. The source image is a grey outline of the shape
//! with a 2-pixel frame painted in the target hue; the target image is the
//! same shape filled with that hue. The mapping source → target is therefore
//! deterministic, and the factors give a ground-truth notion of which samples
//! are neighbours.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::util::rng_for;

pub const NUM_SHAPES: u8 = 3;
pub const CHANNELS: usize = 3;
const SUPERSAMPLE: usize = 4;
const OUTLINE_WIDTH: f64 = 1.5;
const CUE_WIDTH: usize = 2;
/// Angle (radians) a linear factor's full range is bent onto in factor space.
const ARC_SPAN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    /// 0 = circle, 1 = square, 2 = triangle.
    pub shape_class: u8,
    /// Radians in `[0, 2π)`.
    pub hue: f64,
    pub scale: f64,
    pub position: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
    pub scale_range: [f64; 2],
    pub position_range: [f64; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 256,
            val: 64,
            test: 64,
            image_size: 32,
            scale_range: [0.3, 0.9],
            position_range: [0.1, 0.9],
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// First id of a split; ids are global and contiguous across splits.
    pub fn id_offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return config(format!(
                "image_size must be positive and divisible by 4, got {}",
                self.image_size
            ));
        }
        let [slo, shi] = self.scale_range;
        let [plo, phi] = self.position_range;
        if !(0.0 < slo && slo < shi && shi <= 1.0) {
            return config(format!("invalid scale_range {:?}", self.scale_range));
        }
        if !(0.0 <= plo && plo < phi && phi <= 1.0) {
            return config(format!("invalid position_range {:?}", self.position_range));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: usize,
    pub factors: LatentFactors,
    /// H×W×C in `[0, 1]`.
    pub source_image: Array3<f32>,
    /// H×W×C in `[0, 1]`.
    pub target_image: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub split: Split,
    pub seed: u64,
    pub image_size: usize,
    pub factor_ranges: FactorRanges,
}

/// Ranges the factors were drawn from; the factor metric depends on them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorRanges {
    pub scale: [f64; 2],
    pub position: [f64; 2],
}

impl From<&DatasetConfig> for FactorRanges {
    fn from(c: &DatasetConfig) -> Self {
        Self { scale: c.scale_range, position: c.position_range }
    }
}

/// The three splits of one generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<DatasetSplits> {
    config.validate()?;
    Ok(DatasetSplits {
        config: config.clone(),
        seed,
        train: generate_split(config, Split::Train, seed)?,
        val: generate_split(config, Split::Val, seed)?,
        test: generate_split(config, Split::Test, seed)?,
    })
}

pub fn generate_split(config: &DatasetConfig, split: Split, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = rng_for(seed, &format!("datagen/{}", split.name()));
    let ranges = FactorRanges::from(config);
    let offset = config.id_offset(split);
    let samples = (0..config.count(split))
        .map(|i| {
            let factors = sample_factors(&mut rng, &ranges);
            make_sample(offset + i, factors, config.image_size)
        })
        .collect();
    Ok(Dataset { samples, split, seed, image_size: config.image_size, factor_ranges: ranges })
}

fn sample_factors<R: Rng>(rng: &mut R, ranges: &FactorRanges) -> LatentFactors {
    let lerp = |r: [f64; 2], u: f64| r[0] + (r[1] - r[0]) * u;
    let shape_class = rng.random_range(0..NUM_SHAPES);
    let hue = rng.random::<f64>() * TAU;
    let scale = lerp(ranges.scale, rng.random());
    let px = lerp(ranges.position, rng.random());
    let py = lerp(ranges.position, rng.random());
    LatentFactors { shape_class, hue, scale, position: (px, py) }
}

pub fn make_sample(id: usize, factors: LatentFactors, size: usize) -> PairedSample {
    PairedSample {
        id,
        factors,
        source_image: render_source(&factors, size),
        target_image: render_target(&factors, size),
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: usize) -> Result<&PairedSample> {
        let first = self.samples.first().map(|s| s.id).unwrap_or(0);
        id.checked_sub(first)
            .and_then(|i| self.samples.get(i))
            .filter(|s| s.id == id)
            .ok_or_else(|| Error::Lookup(format!("no sample with id {id} in {} split", self.split.name())))
    }

    pub fn position_of(&self, id: usize) -> Result<usize> {
        let first = self.samples.first().map(|s| s.id).unwrap_or(0);
        self.get(id)?;
        Ok(id - first)
    }

    /// Stacks all source (or target) images into an N×H×W×C array.
    pub fn stack(&self, target: bool) -> Array4<f32> {
        let n = self.samples.len();
        let sz = self.image_size;
        let mut out = Array4::zeros((n, sz, sz, CHANNELS));
        for (i, s) in self.samples.iter().enumerate() {
            let img = if target { &s.target_image } else { &s.source_image };
            out.index_axis_mut(Axis(0), i).assign(img);
        }
        out
    }
}

fn hue_to_rgb(hue: f64) -> [f64; 3] {
    // HSV with full saturation and value.
    let h = (hue.rem_euclid(TAU)) / (PI / 3.0);
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (q, t) = (1.0 - f, f);
    match sector {
        0 => [1.0, t, 0.0],
        1 => [q, 1.0, 0.0],
        2 => [0.0, 1.0, t],
        3 => [0.0, q, 1.0],
        4 => [t, 0.0, 1.0],
        _ => [1.0, 0.0, q],
    }
}

/// Signed "inset" test: is point (dx, dy) inside the shape shrunk by `inset` pixels?
fn inside(shape: u8, radius: f64, inset: f64, dx: f64, dy: f64) -> bool {
    match shape {
        0 => (dx * dx + dy * dy).sqrt() <= radius - inset,
        1 => {
            let half = 0.85 * radius - inset;
            dx.abs() <= half && dy.abs() <= half
        }
        _ => {
            // Equilateral triangle pointing up (image y grows downward); edge
            // normals point away from the vertices at -90°, 30°, 150°.
            let inradius = 0.5 * radius - inset;
            [90.0f64, 210.0, 330.0].iter().all(|deg| {
                let a = deg.to_radians();
                dx * a.cos() + dy * a.sin() <= inradius
            })
        }
    }
}

fn coverage(f: &LatentFactors, size: usize, x: usize, y: usize, outline: bool) -> f64 {
    let s = size as f64;
    let (cx, cy) = (f.position.0 * s, f.position.1 * s);
    let radius = 0.3 * f.scale * s;
    let mut hits = 0usize;
    for j in 0..SUPERSAMPLE {
        for i in 0..SUPERSAMPLE {
            let px = x as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64;
            let py = y as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64;
            let (dx, dy) = (px - cx, py - cy);
            let hit = if outline {
                inside(f.shape_class, radius, 0.0, dx, dy)
                    && !inside(f.shape_class, radius, OUTLINE_WIDTH, dx, dy)
            } else {
                inside(f.shape_class, radius, 0.0, dx, dy)
            };
            hits += hit as usize;
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Filled shape in the factor's hue on a black background.
pub fn render_target(f: &LatentFactors, size: usize) -> Array3<f32> {
    let rgb = hue_to_rgb(f.hue);
    Array3::from_shape_fn((size, size, CHANNELS), |(y, x, c)| {
        (coverage(f, size, x, y, false) * rgb[c]) as f32
    })
}

/// Grey outline plus a hue-coloured frame of `CUE_WIDTH` pixels.
pub fn render_source(f: &LatentFactors, size: usize) -> Array3<f32> {
    let rgb = hue_to_rgb(f.hue);
    let mut img = Array3::from_shape_fn((size, size, CHANNELS), |(y, x, _)| {
        coverage(f, size, x, y, true) as f32
    });
    for y in 0..size {
        for x in 0..size {
            let border = x < CUE_WIDTH || y < CUE_WIDTH || x >= size - CUE_WIDTH || y >= size - CUE_WIDTH;
            if border {
                for c in 0..CHANNELS {
                    img[[y, x, c]] = rgb[c] as f32;
                }
            }
        }
    }
    img
}

pub fn flip_horizontal(img: ArrayView3<f32>) -> Array3<f32> {
    img.slice(s![.., ..;-1, ..]).to_owned()
}

// ---------------------------------------------------------------------------
// Factor-space geometry
// ---------------------------------------------------------------------------

/// Point on an arc of length equal to the factor range, so that chord
/// lengths approximate absolute differences for nearby values.
fn arc_point(t: f64, range: [f64; 2]) -> [f64; 2] {
    let width = range[1] - range[0];
    let radius = width / ARC_SPAN;
    let phi = (t - range[0]) / width * ARC_SPAN;
    [radius * phi.cos(), radius * phi.sin()]
}

fn arc_chord(a: f64, b: f64, range: [f64; 2]) -> f64 {
    let width = range[1] - range[0];
    let radius = width / ARC_SPAN;
    2.0 * radius * ((a - b).abs() / width * ARC_SPAN / 2.0).sin()
}

/// Squared factor-space distance.
///
/// Unit weights: shape mismatch costs 1, hue is the chord on the unit circle,
/// scale and position are chords on arcs matched to their ranges. Every
/// component is a distance between points of constant norm, so the same
/// geometry is reproduced exactly by cosine similarity of [`factor_embedding`].
pub fn factor_distance_sq(a: &LatentFactors, b: &LatentFactors, ranges: &FactorRanges) -> f64 {
    let shape = if a.shape_class == b.shape_class { 0.0 } else { 1.0 };
    let hue = 2.0 * ((a.hue - b.hue).abs() / 2.0).sin();
    let scale = arc_chord(a.scale, b.scale, ranges.scale);
    let px = arc_chord(a.position.0, b.position.0, ranges.position);
    let py = arc_chord(a.position.1, b.position.1, ranges.position);
    shape + hue * hue + scale * scale + px * px + py * py
}

pub const FACTOR_EMBEDDING_DIM: usize = NUM_SHAPES as usize + 8;

/// Constant-norm embedding whose Euclidean geometry equals the factor metric.
pub fn factor_embedding(f: &LatentFactors, ranges: &FactorRanges) -> Vec<f64> {
    let mut e = vec![0.0; FACTOR_EMBEDDING_DIM];
    e[f.shape_class as usize] = std::f64::consts::FRAC_1_SQRT_2;
    let n = NUM_SHAPES as usize;
    e[n] = f.hue.cos();
    e[n + 1] = f.hue.sin();
    let arcs = [
        arc_point(f.scale, ranges.scale),
        arc_point(f.position.0, ranges.position),
        arc_point(f.position.1, ranges.position),
    ];
    for (i, p) in arcs.iter().enumerate() {
        e[n + 2 + 2 * i] = p[0];
        e[n + 3 + 2 * i] = p[1];
    }
    e
}

/// The `k` samples nearest to `id` in factor space, excluding `id` itself.
/// Ties go to the lower id.
pub fn oracle_neighbors(ds: &Dataset, id: usize, k: usize) -> Result<Vec<usize>> {
    let center = ds.get(id)?;
    if k >= ds.len() {
        return config(format!("k = {k} must be smaller than the dataset size {}", ds.len()));
    }
    let mut scored: Vec<(f64, usize)> = ds
        .samples
        .iter()
        .filter(|s| s.id != id)
        .map(|s| (factor_distance_sq(&center.factors, &s.factors, &ds.factor_ranges), s.id))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Oracle neighbour lists for every sample, keyed by id.
pub fn oracle_neighbor_table(ds: &Dataset, k: usize) -> Result<BTreeMap<usize, Vec<usize>>> {
    ds.samples.iter().map(|s| Ok((s.id, oracle_neighbors(ds, s.id, k)?))).collect()
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Meta {
    config: DatasetConfig,
    seed: u64,
    splits: BTreeMap<String, SplitMeta>,
}

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    offset: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct FactorRow {
    id: usize,
    shape_class: u8,
    hue: f64,
    scale: f64,
    pos_x: f64,
    pos_y: f64,
}

impl DatasetSplits {
    /// Writes `meta.json`, `factors.csv` and one `<split>.npz` per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let splits = Split::ALL
            .iter()
            .map(|&s| {
                let meta = SplitMeta { offset: self.config.id_offset(s), count: self.config.count(s) };
                (s.name().to_string(), meta)
            })
            .collect();
        let meta = Meta { config: self.config.clone(), seed: self.seed, splits };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

        let mut w = csv::Writer::from_path(dir.join("factors.csv"))?;
        for s in Split::ALL.iter().flat_map(|&sp| self.split(sp).samples.iter()) {
            let f = s.factors;
            w.serialize(FactorRow {
                id: s.id,
                shape_class: f.shape_class,
                hue: f.hue,
                scale: f.scale,
                pos_x: f.position.0,
                pos_y: f.position.1,
            })?;
        }
        w.flush()?;

        for split in Split::ALL {
            let ds = self.split(split);
            let file = fs::File::create(dir.join(format!("{}.npz", split.name())))?;
            let mut npz = NpzWriter::new_compressed(file);
            npz.add_array("source", &ds.stack(false))?;
            npz.add_array("target", &ds.stack(true))?;
            npz.finish()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact { path: meta_path, stage: "gen-data" });
        }
        let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        meta.config.validate()?;

        let mut factors = BTreeMap::new();
        let mut r = csv::Reader::from_path(dir.join("factors.csv"))?;
        for row in r.deserialize() {
            let row: FactorRow = row?;
            let f = LatentFactors {
                shape_class: row.shape_class,
                hue: row.hue,
                scale: row.scale,
                position: (row.pos_x, row.pos_y),
            };
            factors.insert(row.id, f);
        }

        let ranges = FactorRanges::from(&meta.config);
        let load_split = |split: Split| -> Result<Dataset> {
            let file = fs::File::open(dir.join(format!("{}.npz", split.name())))?;
            let mut npz = NpzReader::new(file)?;
            let src: Array4<f32> = npz.by_name("source")?;
            let tgt: Array4<f32> = npz.by_name("target")?;
            let offset = meta.config.id_offset(split);
            let samples = (0..meta.config.count(split))
                .map(|i| {
                    let id = offset + i;
                    let f = *factors
                        .get(&id)
                        .ok_or_else(|| Error::Data(format!("factors.csv lacks id {id}")))?;
                    Ok(PairedSample {
                        id,
                        factors: f,
                        source_image: src.index_axis(Axis(0), i).to_owned(),
                        target_image: tgt.index_axis(Axis(0), i).to_owned(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset {
                samples,
                split,
                seed: meta.seed,
                image_size: meta.config.image_size,
                factor_ranges: ranges,
            })
        };
        let train = load_split(Split::Train)?;
        let val = load_split(Split::Val)?;
        let test = load_split(Split::Test)?;
        Ok(Self { config: meta.config, seed: meta.seed, train, val, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(train: usize) -> DatasetConfig {
        DatasetConfig { train, val: 0, test: 0, ..Default::default() }
    }

    #[test]
    fn empty_split_is_fine() {
        let ds = generate_split(&cfg(0), Split::Train, 1).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn invalid_image_size_rejected() {
        for size in [0, 30] {
            let c = DatasetConfig { image_size: size, ..cfg(1) };
            assert!(matches!(generate_dataset(&c, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_split(&cfg(20), Split::Train, 3).unwrap();
        let b = generate_split(&cfg(20), Split::Train, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_split(&cfg(20), Split::Train, 4).unwrap();
        assert_ne!(a.samples[0].factors, c.samples[0].factors);
    }

    #[test]
    fn targets_rerender_exactly_from_factors() {
        let ds = generate_split(&cfg(10), Split::Train, 5).unwrap();
        for s in &ds.samples {
            assert_eq!(render_target(&s.factors, 32), s.target_image);
            assert_eq!(render_source(&s.factors, 32), s.source_image);
            assert!(s.target_image.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.source_image.dim(), (32, 32, 3));
        }
    }

    #[test]
    fn source_border_carries_hue() {
        let f = LatentFactors { shape_class: 0, hue: 0.0, scale: 0.5, position: (0.5, 0.5) };
        let src = render_source(&f, 32);
        assert_eq!([src[[0, 5, 0]], src[[0, 5, 1]], src[[0, 5, 2]]], [1.0, 0.0, 0.0]);
        let tgt = render_target(&f, 32);
        assert_eq!(tgt[[16, 16, 0]], 1.0);
        assert_eq!(tgt[[16, 16, 1]], 0.0);
    }

    #[test]
    fn ids_are_global_and_contiguous() {
        let c = DatasetConfig { train: 4, val: 3, test: 2, ..Default::default() };
        let d = generate_dataset(&c, 0).unwrap();
        assert_eq!(d.train.ids(), vec![0, 1, 2, 3]);
        assert_eq!(d.val.ids(), vec![4, 5, 6]);
        assert_eq!(d.test.ids(), vec![7, 8]);
        assert!(d.val.get(2).is_err());
        assert_eq!(d.val.get(5).unwrap().id, 5);
    }

    #[test]
    fn planted_duplicate_is_nearest() {
        let mut ds = generate_split(&cfg(12), Split::Train, 9).unwrap();
        ds.samples[9] = make_sample(9, ds.samples[3].factors, 32);
        assert_eq!(oracle_neighbors(&ds, 3, 1).unwrap(), vec![9]);
        assert_eq!(oracle_neighbors(&ds, 9, 1).unwrap(), vec![3]);
    }

    #[test]
    fn exhaustive_k_returns_everything_sorted() {
        let ds = generate_split(&cfg(8), Split::Train, 2).unwrap();
        let n = oracle_neighbors(&ds, 0, 7).unwrap();
        let mut sorted = n.clone();
        sorted.sort();
        assert_eq!(sorted, (1..8).collect::<Vec<_>>());
        let d: Vec<f64> = n
            .iter()
            .map(|&j| factor_distance_sq(&ds.samples[0].factors, &ds.samples[j].factors, &ds.factor_ranges))
            .collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn oracle_errors() {
        let ds = generate_split(&cfg(5), Split::Train, 2).unwrap();
        assert!(matches!(oracle_neighbors(&ds, 99, 1), Err(Error::Lookup(_))));
        assert!(matches!(oracle_neighbors(&ds, 0, 5), Err(Error::Config(_))));
    }

    #[test]
    fn factor_embedding_reproduces_metric() {
        let ds = generate_split(&cfg(30), Split::Train, 11).unwrap();
        let r = ds.factor_ranges;
        let norm0: f64 = factor_embedding(&ds.samples[0].factors, &r).iter().map(|v| v * v).sum();
        for a in &ds.samples {
            let ea = factor_embedding(&a.factors, &r);
            let na: f64 = ea.iter().map(|v| v * v).sum();
            assert!((na - norm0).abs() < 1e-12);
            for b in &ds.samples {
                let eb = factor_embedding(&b.factors, &r);
                let d2: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y) * (x - y)).sum();
                assert!((d2 - factor_distance_sq(&a.factors, &b.factors, &r)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let c = DatasetConfig { train: 5, val: 2, test: 1, ..Default::default() };
        let d = generate_dataset(&c, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = DatasetSplits::load(dir.path()).unwrap();
        assert_eq!(back, d);
    }
}
