//! Fréchet proxy on encoder features, generator evaluation, and report
//! emission (loss curves, ablation tables, neighbourhood grids).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{contract, Error, Result};
use crate::manifold::{neighborhood_overlap, predict_dataset, NeighborhoodIndex};
use crate::models::{EncoderNet, GeneratorNet};
use crate::pruneloop::PruneRow;

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FrechetStats {
    /// Mean and unbiased covariance of feature rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return contract(format!("Fréchet statistics need at least 2 samples, got {n}"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return contract("feature rows differ in dimension");
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mu = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let sigma = (centered.transpose() * &centered) / (n as f64 - 1.0);
        Ok(Self { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½)`, clipped at zero.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return contract(format!("Fréchet stats of dimension {} and {}", a.dim(), b.dim()));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    // Tr((ΣaΣb)^½) = Tr((Σa^½ Σb Σa^½)^½), which keeps every root symmetric.
    let ra = sym_sqrt(&a.sigma);
    let inner = &ra * &b.sigma * &ra;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub frechet: f64,
    /// Mean absolute error in `[0, 1]` pixel units.
    pub l1: f64,
    pub n: usize,
}

/// Fréchet proxy and L1 of given predictions against the split's targets.
pub fn eval_predictions(preds: &[Array3<f32>], ds: &Dataset, enc: &EncoderNet) -> Result<EvalResult> {
    if ds.len() < 2 || preds.len() != ds.len() {
        return contract(format!("evaluation needs matching splits of at least 2 samples, got {}", ds.len()));
    }
    let targets: Vec<&Array3<f32>> = ds.samples.iter().map(|s| &s.target_image).collect();
    let fake: Vec<&Array3<f32>> = preds.iter().collect();
    let fa = FrechetStats::from_rows(&enc.embed_images(&fake)?)?;
    let fb = FrechetStats::from_rows(&enc.embed_images(&targets)?)?;
    let mut abs = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(&targets) {
        abs += p.iter().zip(t.iter()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        count += p.len();
    }
    Ok(EvalResult { frechet: frechet_distance(&fa, &fb)?, l1: abs / count as f64, n: ds.len() })
}

pub fn eval_generator(gen: &GeneratorNet, ds: &Dataset, enc: &EncoderNet) -> Result<EvalResult> {
    eval_predictions(&predict_dataset(gen, ds)?, ds, enc)
}

// ---------------------------------------------------------------------------
// Figures and tables
// ---------------------------------------------------------------------------

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const PAD: f64 = 36.0;

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    format!(r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.join(" "))
}

/// One SVG with a panel per run: loss_G, loss_D and R rescaled to `[0, 1]`.
pub fn loss_curves_svg(runs: &[(String, Vec<PruneRow>)]) -> Result<String> {
    if runs.is_empty() || runs.iter().any(|(_, r)| r.is_empty()) {
        return Err(Error::Report("loss curves need at least one non-empty history".into()));
    }
    let width = PANEL_W * runs.len() as f64;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" font-family="sans-serif" font-size="10">"#
    );
    for (p, (label, rows)) in runs.iter().enumerate() {
        let x0 = p as f64 * PANEL_W;
        let (lo, hi) = rows
            .iter()
            .flat_map(|r| [r.loss_g, r.loss_d])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let r_max = rows.iter().map(|r| r.resource).fold(0.0, f64::max);
        let n = rows.len().max(2) - 1;
        let px = |i: usize| x0 + PAD + (PANEL_W - 2.0 * PAD) * i as f64 / n as f64;
        let py = |v: f64| PANEL_H - PAD - (PANEL_H - 2.0 * PAD) * v;
        let series = |f: &dyn Fn(&PruneRow) -> f64| -> Vec<(f64, f64)> {
            rows.iter().enumerate().map(|(i, r)| (px(i), py(f(r)))).collect()
        };
        let _ = write!(
            svg,
            r##"<rect x="{:.1}" y="{PAD}" width="{:.1}" height="{:.1}" fill="none" stroke="#999"/>"##,
            x0 + PAD,
            PANEL_W - 2.0 * PAD,
            PANEL_H - 2.0 * PAD
        );
        svg += &polyline(&series(&|r| (r.loss_g - lo) / span), "#1f77b4");
        svg += &polyline(&series(&|r| (r.loss_d - lo) / span), "#d62728");
        svg += &polyline(&series(&|r| if r_max > 0.0 { r.resource / r_max } else { 0.0 }), "#2ca02c");
        let _ = write!(svg, r#"<text x="{:.1}" y="20">{}</text>"#, x0 + PAD, xml_escape(label));
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">loss range [{lo:.2}, {hi:.2}], R max {r_max:.3}, {} steps</text>"#,
            x0 + PAD,
            PANEL_H - 12.0,
            rows.len()
        );
        let _ = write!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" fill="#1f77b4">G</text><text x="{:.1}" y="{:.1}" fill="#d62728">D</text><text x="{:.1}" y="{:.1}" fill="#2ca02c">R</text>"##,
            x0 + PANEL_W - PAD - 40.0,
            PAD - 4.0,
            x0 + PANEL_W - PAD - 28.0,
            PAD - 4.0,
            x0 + PANEL_W - PAD - 16.0,
            PAD - 4.0
        );
    }
    svg += "</svg>\n";
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One row of the ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub prune_d: bool,
    pub use_agents: bool,
    pub exchange_feedback: bool,
    pub manifold_real_set: bool,
    pub use_kd: bool,
    pub generator_macs: f64,
    pub compression_ratio: f64,
    pub frechet: f64,
    pub l1: f64,
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "✓" } else { "" };
    let mut md = String::from(
        "| Method | D pruning | Agents | G↔D feedback | Manifold | KD | G MACs | Compression | Fréchet proxy | L1 |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {:.3}M | {:.1}% | {:.4} | {:.4} |",
            r.name,
            mark(r.prune_d),
            mark(r.use_agents),
            mark(r.exchange_feedback),
            mark(r.manifold_real_set),
            mark(r.use_kd),
            r.generator_macs / 1e6,
            100.0 * r.compression_ratio,
            r.frechet,
            r.l1
        );
    }
    md
}

pub fn write_ablation(rows: &[AblationRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ablation.md"), ablation_markdown(rows))?;
    crate::pruneloop::write_history_csv(rows, &dir.join("ablation.csv"))
}

/// Tiles `rows` of equally sized `[0, 1]` images into one RGB grid.
pub fn image_grid(rows: &[Vec<&Array3<f32>>], gap: usize) -> Result<image::RgbImage> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::Report("empty image grid".into()))?;
    let (h, w, c) = first.dim();
    if c != 3 {
        return contract("grids expect RGB images");
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = cols * (w + gap) + gap;
    let gh = rows.len() * (h + gap) + gap;
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (k, tile) in row.iter().enumerate() {
            if tile.dim() != (h, w, c) {
                return contract("grid tiles differ in size");
            }
            let (ox, oy) = (gap + k * (w + gap), gap + r * (h + gap));
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| (tile[[y, x, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    Ok(img)
}

/// Centre plus neighbours for a few centres, one row each.
pub fn neighborhood_grid(
    centers: &[usize],
    neighbors: &BTreeMap<usize, Vec<usize>>,
    images: &BTreeMap<usize, &Array3<f32>>,
) -> Result<image::RgbImage> {
    let mut rows = Vec::with_capacity(centers.len());
    for c in centers {
        let list = neighbors.get(c).ok_or_else(|| Error::Report(format!("no neighbours for centre {c}")))?;
        let mut row = vec![*images.get(c).ok_or_else(|| Error::Report(format!("no image for {c}")))?];
        for j in list {
            row.push(*images.get(j).ok_or_else(|| Error::Report(format!("no image for {j}")))?);
        }
        rows.push(row);
    }
    image_grid(&rows, 2)
}

/// Original vs pruned neighbourhoods over the same centres.
#[derive(Debug, Clone)]
pub struct NeighborhoodPanel {
    pub original: NeighborhoodIndex,
    pub pruned: NeighborhoodIndex,
    pub original_images: BTreeMap<usize, Array3<f32>>,
    pub pruned_images: BTreeMap<usize, Array3<f32>>,
    pub centers: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    /// Pruning histories, one curve panel each.
    pub prune_runs: Vec<(String, Vec<PruneRow>)>,
    pub ablation: Vec<AblationRow>,
    pub ablation_runs: Vec<(String, Vec<PruneRow>)>,
    pub neighborhoods: Option<NeighborhoodPanel>,
    /// Inputs the caller looked for and did not find.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub files: Vec<String>,
    /// Mean overlap of pruned-generator neighbourhoods with the original ones.
    pub neighborhood_overlap: Option<f64>,
    pub missing: Vec<String>,
}

/// Writes curves, tables and grids under `dir`.
pub fn emit_report(inputs: &ReportInputs, dir: &Path) -> Result<ReportSummary> {
    if inputs.prune_runs.is_empty() && inputs.ablation.is_empty() {
        let missing = if inputs.missing.is_empty() { "pruning history".to_string() } else { inputs.missing.join(", ") };
        return Err(Error::Report(format!("nothing to report, missing inputs: {missing}")));
    }
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    if !inputs.prune_runs.is_empty() {
        std::fs::write(dir.join("loss_curves.svg"), loss_curves_svg(&inputs.prune_runs)?)?;
        files.push("loss_curves.svg".to_string());
    }
    if !inputs.ablation.is_empty() {
        write_ablation(&inputs.ablation, dir)?;
        files.extend(["ablation.md".to_string(), "ablation.csv".to_string()]);
    }
    if !inputs.ablation_runs.is_empty() {
        std::fs::write(dir.join("ablation_curves.svg"), loss_curves_svg(&inputs.ablation_runs)?)?;
        files.push("ablation_curves.svg".to_string());
    }
    let mut overlap = None;
    if let Some(panel) = &inputs.neighborhoods {
        let o = neighborhood_overlap(&panel.pruned, &panel.original.id_lists())?;
        let orig_lists = panel.original.id_lists();
        let pruned_lists = panel.pruned.id_lists();
        let orig_imgs: BTreeMap<usize, &Array3<f32>> = panel.original_images.iter().map(|(k, v)| (*k, v)).collect();
        let pruned_imgs: BTreeMap<usize, &Array3<f32>> = panel.pruned_images.iter().map(|(k, v)| (*k, v)).collect();
        neighborhood_grid(&panel.centers, &orig_lists, &orig_imgs)?.save(dir.join("neighborhoods_original.png"))?;
        neighborhood_grid(&panel.centers, &pruned_lists, &pruned_imgs)?.save(dir.join("neighborhoods_pruned.png"))?;
        files.extend(["neighborhoods_original.png".to_string(), "neighborhoods_pruned.png".to_string()]);
        overlap = Some(o);
    }
    let summary = ReportSummary { files, neighborhood_overlap: overlap, missing: inputs.missing.clone() };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
