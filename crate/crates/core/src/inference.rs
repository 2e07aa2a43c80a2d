//! Hierarchical prediction, coarse aggregation, accuracy metrics and the
//! prototype clustering-quality metric.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{HpnetError, Result};
use crate::model::{ForwardOutput, HpnetModel};
use crate::numerics::Tensor;
use crate::taxonomy::{NodeId, Taxonomy};

/// Batch size used when running a model over a whole dataset.
pub const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopActivation {
    pub prototype: usize,
    pub score: f64,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierPrediction {
    /// One conditional distribution per prototype layer (parent order).
    pub conditionals: Vec<Vec<f64>>,
    /// Joint probability of every leaf, in taxonomy leaf order.
    pub joint: Vec<f64>,
    /// Label path of the most probable leaf.
    pub path: Vec<String>,
    /// Highest-scoring prototypes per layer, best first.
    pub top_activations: Vec<Vec<TopActivation>>,
}

const TOP_ACTIVATIONS: usize = 3;

/// Leaf probabilities as products of conditionals along each root-to-leaf path.
pub fn joint_from_conditionals(taxonomy: &Taxonomy, conditionals: &[Vec<f64>]) -> Vec<f64> {
    taxonomy
        .leaves()
        .iter()
        .map(|&leaf| {
            taxonomy
                .path_edges(leaf)
                .iter()
                .map(|&(p, c)| conditionals[taxonomy.parent_index(p).expect("parent")][c])
                .product()
        })
        .collect()
}

/// Path obtained by following the most probable child from the root.
pub fn greedy_path(taxonomy: &Taxonomy, conditionals: &[Vec<f64>]) -> Vec<String> {
    let mut node = taxonomy.root();
    let mut path = Vec::new();
    while !taxonomy.is_leaf(node) {
        let probs = &conditionals[taxonomy.parent_index(node).expect("parent")];
        node = taxonomy.children(node)[argmax(probs)];
        path.push(taxonomy.name(node).to_string());
    }
    path
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn predictions_from(model: &HpnetModel, out: &ForwardOutput) -> Vec<HierPrediction> {
    let tax = model.taxonomy();
    let n = out.latent.shape()[0];
    (0..n)
        .map(|i| {
            let conditionals: Vec<Vec<f64>> =
                out.layers.iter().map(|l| l.probs[i].clone()).collect();
            let joint = joint_from_conditionals(tax, &conditionals);
            let leaf = tax.leaves()[argmax(&joint)];
            let top_activations = out
                .layers
                .iter()
                .map(|l| {
                    let m = l.scores.shape()[1];
                    let row = &l.scores.data()[i * m..(i + 1) * m];
                    let mut order: Vec<usize> = (0..m).collect();
                    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                    order
                        .into_iter()
                        .take(TOP_ACTIVATIONS)
                        .map(|j| {
                            let (r, c) = l.argmax[i * m + j];
                            TopActivation {
                                prototype: j,
                                score: row[j],
                                row: r,
                                col: c,
                            }
                        })
                        .collect()
                })
                .collect();
            HierPrediction {
                conditionals,
                joint,
                path: tax.label_for(leaf).path,
                top_activations,
            }
        })
        .collect()
}

pub fn predict(model: &HpnetModel, batch: &Tensor) -> Result<Vec<HierPrediction>> {
    Ok(predictions_from(model, &model.forward(batch)?))
}

pub fn predict_images(model: &HpnetModel, images: &[&Tensor]) -> Result<Vec<HierPrediction>> {
    let mut out = Vec::with_capacity(images.len());
    for fo in model.forward_images(images, EVAL_CHUNK)? {
        out.extend(predictions_from(model, &fo));
    }
    Ok(out)
}

/// Sums leaf probabilities into the level-`k` nodes containing them.
/// `leaves` names the classes `probs` refers to.
pub fn coarse_from_flat(
    taxonomy: &Taxonomy,
    leaves: &[String],
    probs: &[f64],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if leaves.len() != probs.len() {
        return Err(HpnetError::Dimension(format!(
            "{} leaf names for {} probabilities",
            leaves.len(),
            probs.len()
        )));
    }
    let level = taxonomy.level(k);
    let mut out: Vec<(String, f64)> = level
        .iter()
        .map(|&n| (taxonomy.name(n).to_string(), 0.0))
        .collect();
    for (name, &p) in leaves.iter().zip(probs) {
        let id = taxonomy
            .find(name)
            .filter(|&id| taxonomy.is_leaf(id))
            .ok_or_else(|| HpnetError::Data(format!("{name} is not a leaf of the taxonomy")))?;
        let anc = ancestor_at(taxonomy, id, k);
        let slot = level
            .iter()
            .position(|&n| n == anc)
            .expect("ancestor is on the level");
        out[slot].1 += p;
    }
    Ok(out)
}

fn ancestor_at(taxonomy: &Taxonomy, id: NodeId, k: usize) -> NodeId {
    let path = taxonomy.path_to(id);
    if k == 0 {
        taxonomy.root()
    } else {
        path.get(k - 1).copied().unwrap_or(id)
    }
}

/// Level-1 distribution implied by a joint over all leaves.
pub fn coarse_of_joint(taxonomy: &Taxonomy, joint: &[f64]) -> Vec<(String, f64)> {
    let names: Vec<String> = taxonomy
        .leaves()
        .iter()
        .map(|&l| taxonomy.name(l).to_string())
        .collect();
    coarse_from_flat(taxonomy, &names, joint, 1).expect("taxonomy leaves")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySuite {
    pub f_id: f64,
    pub c_id: f64,
    pub c_novel: Option<f64>,
}

fn coarse_prediction(taxonomy: &Taxonomy, p: &HierPrediction) -> String {
    let coarse = coarse_of_joint(taxonomy, &p.joint);
    let probs: Vec<f64> = coarse.iter().map(|c| c.1).collect();
    coarse[argmax(&probs)].0.clone()
}

/// Fraction of items whose most probable leaf matches their label.
pub fn fine_accuracy(preds: &[HierPrediction], data: &LabeledDataset) -> f64 {
    let hits = preds
        .iter()
        .zip(&data.items)
        .filter(|(p, item)| p.path == item.label.path)
        .count();
    hits as f64 / data.len().max(1) as f64
}

/// Fraction of items whose most probable level-1 class matches their label.
pub fn coarse_accuracy(
    taxonomy: &Taxonomy,
    preds: &[HierPrediction],
    data: &LabeledDataset,
) -> f64 {
    let hits = preds
        .iter()
        .zip(&data.items)
        .filter(|(p, item)| Some(coarse_prediction(taxonomy, p).as_str()) == item.label.coarse())
        .count();
    hits as f64 / data.len().max(1) as f64
}

pub fn accuracy_suite(
    model: &HpnetModel,
    data: &LabeledDataset,
    novel: Option<&LabeledDataset>,
) -> Result<AccuracySuite> {
    if data.is_empty() {
        return Err(HpnetError::Data("accuracy on an empty dataset".into()));
    }
    let tax = model.taxonomy();
    let preds = predict_images(model, &data.images())?;
    let c_novel = match novel {
        Some(nd) if nd.is_empty() => {
            return Err(HpnetError::Data(
                "accuracy on an empty novel dataset".into(),
            ))
        }
        Some(nd) => {
            let np = predict_images(model, &nd.images())?;
            Some(coarse_accuracy(tax, &np, nd))
        }
        None => None,
    };
    Ok(AccuracySuite {
        f_id: fine_accuracy(&preds, data),
        c_id: coarse_accuracy(tax, &preds, data),
        c_novel,
    })
}

/// Number of neighbor images ranked per prototype.
pub const NEIGHBORS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringQuality {
    /// Mean percentage per layer, keyed by parent name.
    pub per_layer: BTreeMap<String, f64>,
    /// Mean percentage over every prototype of every layer.
    pub overall: f64,
}

/// Nearest squared distance from `proto` to any patch of `latent` `[D', H, W]`.
pub fn nearest_patch(latent: &Tensor, proto: &[f64]) -> (f64, usize, usize) {
    let (d, h, w) = (latent.shape()[0], latent.shape()[1], latent.shape()[2]);
    let hw = h * w;
    let z = latent.data();
    let mut best = (f64::INFINITY, 0, 0);
    for pos in 0..hw {
        let mut dist = 0.0;
        for (k, &pk) in proto.iter().enumerate().take(d) {
            let diff = z[k * hw + pos] - pk;
            dist += diff * diff;
        }
        if dist < best.0 {
            best = (dist, pos / w, pos % w);
        }
    }
    best
}

/// Indices of the `k` images nearest to `proto` (one patch per image),
/// ordered by distance then image index.
pub fn nearest_images(
    latents: &[Tensor],
    proto: &[f64],
    k: usize,
) -> Vec<(usize, f64, usize, usize)> {
    let mut all: Vec<(usize, f64, usize, usize)> = latents
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let (d, r, c) = nearest_patch(z, proto);
            (i, d, r, c)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Clustering quality from per-image latents `[D', H, W]` and label paths.
pub fn clustering_quality_from_latents(
    model: &HpnetModel,
    latents: &[Tensor],
    paths: &[Vec<String>],
) -> ClusteringQuality {
    let tax = model.taxonomy();
    let mut per_layer = BTreeMap::new();
    let mut all = Vec::new();
    for (k, layer) in model.layers.iter().enumerate() {
        let parent = tax.parents()[k];
        let mut scores = Vec::with_capacity(layer.num_prototypes());
        for j in 0..layer.num_prototypes() {
            let child = tax.name(tax.children(parent)[layer.allocation[j]]);
            let nn = nearest_images(latents, layer.prototype(j), NEIGHBORS);
            let correct = nn
                .iter()
                .filter(|(i, ..)| paths[*i].iter().any(|n| n == child))
                .count();
            scores.push(100.0 * correct as f64 / nn.len().max(1) as f64);
        }
        per_layer.insert(layer.parent.clone(), mean(&scores));
        all.extend(scores);
    }
    ClusteringQuality {
        per_layer,
        overall: mean(&all),
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-image latents of a dataset, in item order.
pub fn dataset_latents(model: &HpnetModel, data: &LabeledDataset) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.images().chunks(EVAL_CHUNK) {
        let z = model.forward_latent(&Tensor::stack(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| z.slice_outer(i)));
    }
    Ok(out)
}

pub fn clustering_quality(model: &HpnetModel, data: &LabeledDataset) -> Result<ClusteringQuality> {
    if data.is_empty() {
        return Err(HpnetError::Data(
            "clustering quality on an empty dataset".into(),
        ));
    }
    let latents = dataset_latents(model, data)?;
    let paths: Vec<Vec<String>> = data.items.iter().map(|i| i.label.path.clone()).collect();
    Ok(clustering_quality_from_latents(model, &latents, &paths))
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: AccuracySuite,
    pub clustering: BTreeMap<String, ClusteringQuality>,
}

impl MetricsReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "f_id={:.6}\nc_id={:.6}\n",
            self.accuracy.f_id, self.accuracy.c_id
        );
        if let Some(n) = self.accuracy.c_novel {
            s.push_str(&format!("c_novel={n:.6}\n"));
        }
        for (split, q) in &self.clustering {
            s.push_str(&format!("clustering.{split}.overall={:.6}\n", q.overall));
            for (layer, v) in &q.per_layer {
                s.push_str(&format!("clustering.{split}.{layer}={v:.6}\n"));
            }
        }
        s
    }
}
