//! Prototype evidence for a prediction: upsampled activation heat maps,
//! ranked logit contributions and prototype nearest-neighbor grids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{write_png, LabeledDataset};
use crate::error::{HpnetError, Result};
use crate::inference::{argmax, dataset_latents, joint_from_conditionals, nearest_images};
use crate::model::HpnetModel;
use crate::numerics::Tensor;
use crate::training::ProjectionReport;

/// Row-major grid of values in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// First maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let i = argmax(&self.values);
        (i / self.width, i % self.width)
    }

    /// `height width` header then one whitespace-separated row per line.
    /// Values are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.height, self.width);
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| HpnetError::Data(format!("heat map text: {m}"));
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("header")))
            .collect::<Result<_>>()?;
        let [height, width] = header[..] else {
            return Err(bad("header needs two sizes"));
        };
        let values: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse().map_err(|_| bad("value")))
            .collect::<Result<_>>()?;
        if values.len() != height * width {
            return Err(bad("value count"));
        }
        Ok(HeatMap {
            height,
            width,
            values,
        })
    }

    /// Source-grid coordinates of an output cell under corner-aligned sampling.
    pub fn source_coords(&self, row: usize, col: usize, src_h: usize, src_w: usize) -> (f64, f64) {
        (
            corner_aligned(row, self.height, src_h),
            corner_aligned(col, self.width, src_w),
        )
    }
}

fn corner_aligned(o: usize, out: usize, src: usize) -> f64 {
    if out <= 1 || src <= 1 {
        0.0
    } else {
        o as f64 * (src - 1) as f64 / (out - 1) as f64
    }
}

/// Bilinear upsampling (corner-aligned) of an `h × w` map to `h0 × w0`,
/// then min-max normalization. A constant map becomes all 0.5.
///
/// When `h0 − 1` is a multiple of `h − 1` (and likewise for widths) every
/// map cell is sampled exactly, so the output peaks at the map's argmax.
/// Otherwise the peak can shift toward a near-equal sampled cell.
pub fn heat_map(map: &[f64], h: usize, w: usize, h0: usize, w0: usize) -> Result<HeatMap> {
    if map.len() != h * w || h == 0 || w == 0 {
        return Err(HpnetError::Dimension(format!(
            "activation map has {} values, expected {h}x{w}",
            map.len()
        )));
    }
    if h0 < h || w0 < w {
        return Err(HpnetError::Dimension(format!(
            "heat map target {h0}x{w0} is smaller than the map {h}x{w}"
        )));
    }
    let mut values = Vec::with_capacity(h0 * w0);
    for oy in 0..h0 {
        let sy = corner_aligned(oy, h0, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..w0 {
            let sx = corner_aligned(ox, w0, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            values.push(top * (1.0 - fy) + bot * fy);
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in &mut values {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        values.fill(0.5);
    }
    Ok(HeatMap {
        height: h0,
        width: w0,
        values,
    })
}

/// Heat map colored blue to red and alpha-blended over a `[3, H, W]` image.
pub fn overlay(image: &Tensor, heat: &HeatMap) -> Result<Tensor> {
    let (h, w) = (heat.height, heat.width);
    if image.shape() != [3, h, w] {
        return Err(HpnetError::Dimension(format!(
            "overlay of a {h}x{w} heat map on an image of shape {:?}",
            image.shape()
        )));
    }
    const ALPHA: f64 = 0.5;
    let ramp = |v: f64, center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let v = heat.values[p];
        let color = ramp(v, [3.0, 2.0, 1.0][c]);
        (1.0 - ALPHA) * image.data()[i] + ALPHA * color
    }))
}

/// Where a projected prototype came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePatch {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub rank: usize,
    pub prototype: usize,
    pub prototype_id: String,
    /// Child the prototype is allocated to.
    pub class: String,
    pub score: f64,
    pub weight: f64,
    /// `weight × score` toward the predicted child's logit.
    pub contribution: f64,
    /// `|contribution|` over the sum of absolute contributions of the level.
    pub share: f64,
    pub row: usize,
    pub col: usize,
    /// Relative path of the rendered overlay.
    pub heat_map_file: String,
    pub source_patch: Option<SourcePatch>,
    #[serde(skip)]
    pub heat_map: Option<HeatMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelExplanation {
    pub level: usize,
    pub parent: String,
    pub predicted: String,
    pub logit: f64,
    /// Sum of every prototype's contribution, listed or not.
    pub total_contribution: f64,
    /// Sum of the shares of the listed contributions.
    pub listed_share: f64,
    pub contributions: Vec<Contribution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_id: String,
    pub path: Vec<String>,
    pub levels: Vec<LevelExplanation>,
    pub warnings: Vec<String>,
}

/// Prototype name used in files and on the command line.
pub fn prototype_id(parent: &str, j: usize) -> String {
    format!("{parent}-p{j}")
}

/// Inverse of [`prototype_id`].
pub fn parse_prototype_id(id: &str) -> Result<(String, usize)> {
    id.rsplit_once("-p")
        .and_then(|(p, j)| Some((p.to_string(), j.parse().ok()?)))
        .ok_or_else(|| {
            HpnetError::Config(format!(
                "prototype id {id} is not of the form <parent>-p<index>"
            ))
        })
}

/// Signed contributions `w·s`, ranked by value (ties by index), with shares of
/// the total absolute contribution.
pub fn rank_contributions(scores: &[f64], weights: &[f64]) -> Vec<(usize, f64, f64)> {
    let contrib: Vec<f64> = scores.iter().zip(weights).map(|(s, w)| s * w).collect();
    let total: f64 = contrib.iter().map(|c| c.abs()).sum();
    let mut order: Vec<usize> = (0..contrib.len()).collect();
    order.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|j| {
            let share = if total > 0.0 {
                contrib[j].abs() / total
            } else {
                0.0
            };
            (j, contrib[j], share)
        })
        .collect()
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Explains the prediction for one `[C, H, W]` image at every parent on the
/// predicted path, listing the `top_k` strongest contributions per level.
pub fn explain_prediction(
    model: &HpnetModel,
    image: &Tensor,
    image_id: &str,
    top_k: usize,
    projection: Option<&ProjectionReport>,
) -> Result<Explanation> {
    let out = model.forward(&Tensor::stack(&[image])?)?;
    let tax = model.taxonomy();
    let conditionals: Vec<Vec<f64>> = out.layers.iter().map(|l| l.probs[0].clone()).collect();
    let joint = joint_from_conditionals(tax, &conditionals);
    let leaf = tax.leaves()[argmax(&joint)];
    let (h0, w0) = (image.shape()[1], image.shape()[2]);

    let mut warnings = Vec::new();
    if model.meta.projections == 0 {
        let w =
            "model has not been through a projection; prototypes are not image patches".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }

    let mut levels = Vec::new();
    for (level, (parent, child)) in tax.path_edges(leaf).into_iter().enumerate() {
        let k = tax
            .parent_index(parent)
            .expect("path edge starts at a parent");
        let layer = &model.layers[k];
        let lo = &out.layers[k];
        let m = layer.num_prototypes();
        let (mh, mw) = (lo.maps.shape()[2], lo.maps.shape()[3]);
        let scores = &lo.scores.data()[..m];
        let weights = &layer.fc.data()[child * m..(child + 1) * m];
        let ranked = rank_contributions(scores, weights);
        let total_contribution = ranked.iter().map(|r| r.1).sum();
        let parent_name = tax.name(parent);
        let children = tax.children(parent);
        let mut contributions = Vec::new();
        for (rank, &(j, contribution, share)) in ranked.iter().take(top_k).enumerate() {
            let map = &lo.maps.data()[j * mh * mw..(j + 1) * mh * mw];
            let heat = heat_map(map, mh, mw, h0, w0)?;
            let (row, col) = lo.argmax[j];
            let pid = prototype_id(parent_name, j);
            let source_patch = projection.and_then(|p| {
                p.records
                    .iter()
                    .find(|r| r.parent == parent_name && r.prototype == j)
                    .map(|r| SourcePatch {
                        image_id: r.image_id.clone(),
                        row: r.row,
                        col: r.col,
                        distance: r.distance,
                    })
            });
            contributions.push(Contribution {
                rank,
                prototype: j,
                class: tax.name(children[layer.allocation[j]]).to_string(),
                score: scores[j],
                weight: weights[j],
                contribution,
                share,
                row,
                col,
                heat_map_file: format!("{level}/{rank}_{pid}.png"),
                prototype_id: pid,
                source_patch,
                heat_map: Some(heat),
            });
        }
        levels.push(LevelExplanation {
            level,
            parent: parent_name.to_string(),
            predicted: tax.name(children[child]).to_string(),
            logit: lo.logits.data()[child],
            total_contribution,
            listed_share: contributions.iter().map(|c| c.share).sum(),
            contributions,
        });
    }
    Ok(Explanation {
        image_id: image_id.to_string(),
        path: tax.label_for(leaf).path,
        levels,
        warnings,
    })
}

/// Writes `<root>/<image-id>/explanation.json` plus, per listed prototype,
/// `<level>/<rank>_<prototype-id>.png` (overlay) and `.txt` (raw grid).
pub fn write_explanation(
    explanation: &Explanation,
    image: &Tensor,
    root: &Path,
) -> Result<PathBuf> {
    let dir = root.join(file_safe(&explanation.image_id));
    for level in &explanation.levels {
        let ldir = dir.join(level.level.to_string());
        fs::create_dir_all(&ldir).map_err(|e| HpnetError::io(&ldir, e))?;
        for c in &level.contributions {
            let Some(heat) = &c.heat_map else { continue };
            let png = dir.join(&c.heat_map_file);
            write_png(&overlay(image, heat)?, &png)?;
            let txt = png.with_extension("txt");
            fs::write(&txt, heat.to_text()).map_err(|e| HpnetError::io(&txt, e))?;
        }
    }
    let json = dir.join("explanation.json");
    fs::write(&json, serde_json::to_string_pretty(explanation)?)
        .map_err(|e| HpnetError::io(&json, e))?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub rank: usize,
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub distance: f64,
    #[serde(skip)]
    pub heat_map: Option<HeatMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub prototype_id: String,
    pub neighbors: Vec<Neighbor>,
    pub warnings: Vec<String>,
}

/// The `k` images whose nearest patch is closest to prototype `j` of
/// `parent`, one entry per image, ascending distance.
pub fn prototype_neighbors(
    model: &HpnetModel,
    data: &LabeledDataset,
    parent: &str,
    j: usize,
    k: usize,
) -> Result<NeighborReport> {
    if data.is_empty() {
        return Err(HpnetError::Data(
            "nearest neighbors over an empty dataset".into(),
        ));
    }
    let (_, layer) = model
        .layer_by_name(parent)
        .ok_or_else(|| HpnetError::Config(format!("no prototype layer for {parent}")))?;
    if j >= layer.num_prototypes() {
        return Err(HpnetError::Config(format!(
            "{parent} has {} prototypes, asked for {j}",
            layer.num_prototypes()
        )));
    }
    let mut warnings = Vec::new();
    if k > data.len() {
        let w = format!("asked for {k} neighbors of a {}-image dataset", data.len());
        log::warn!("{w}");
        warnings.push(w);
    }
    let proto = layer.prototype(j);
    let latents = dataset_latents(model, data)?;
    let mut neighbors = Vec::new();
    for (rank, (i, distance, row, col)) in
        nearest_images(&latents, proto, k).into_iter().enumerate()
    {
        let item = &data.items[i];
        let z = &latents[i];
        let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let map: Vec<f64> = (0..h * w)
            .map(|pos| {
                let sq: f64 = (0..d)
                    .map(|c| (z.data()[c * h * w + pos] - proto[c]).powi(2))
                    .sum();
                (1.0 + 1.0 / (sq + layer.epsilon)).ln()
            })
            .collect();
        let heat = heat_map(&map, h, w, item.image.shape()[1], item.image.shape()[2])?;
        neighbors.push(Neighbor {
            rank,
            image_id: item.id.clone(),
            row,
            col,
            distance,
            heat_map: Some(heat),
        });
    }
    Ok(NeighborReport {
        prototype_id: prototype_id(parent, j),
        neighbors,
        warnings,
    })
}

/// Writes `<root>/<prototype-id>/neighbors.json` and one overlay PNG plus raw
/// grid per neighbor as `<rank>_<image-id>`.
pub fn write_neighbors(
    report: &NeighborReport,
    data: &LabeledDataset,
    root: &Path,
) -> Result<PathBuf> {
    let dir = root.join(file_safe(&report.prototype_id));
    fs::create_dir_all(&dir).map_err(|e| HpnetError::io(&dir, e))?;
    for n in &report.neighbors {
        let Some(heat) = &n.heat_map else { continue };
        let item = data
            .items
            .iter()
            .find(|i| i.id == n.image_id)
            .ok_or_else(|| {
                HpnetError::Data(format!("image {} is not in the dataset", n.image_id))
            })?;
        let base = dir.join(format!("{}_{}", n.rank, file_safe(&n.image_id)));
        write_png(&overlay(&item.image, heat)?, &base.with_extension("png"))?;
        let txt = base.with_extension("txt");
        fs::write(&txt, heat.to_text()).map_err(|e| HpnetError::io(&txt, e))?;
    }
    let json = dir.join("neighbors.json");
    fs::write(&json, serde_json::to_string_pretty(report)?)
        .map_err(|e| HpnetError::io(&json, e))?;
    Ok(dir)
}
