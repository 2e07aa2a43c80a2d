//! Training objective: per-parent cross-entropy, clustering, separation and
//! evidence-weight regularization, plus the uniform-target term on noise images.
//!
//! All data terms are sums over images (no batch averaging).

use serde::{Deserialize, Serialize};

use crate::error::{HpnetError, Result};
use crate::model::{HpnetModel, ModelVars, PrototypeLayer};
use crate::numerics::{Tape, Tensor, Var};
use crate::taxonomy::{HierarchicalLabel, Taxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.8,
            lambda2: 0.08,
            lambda3: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HpnetError::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentLoss {
    pub parent: String,
    pub cross_entropy: f64,
    pub clust: f64,
    pub sep: f64,
    pub reg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_parent: Vec<ParentLoss>,
    pub ceda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn cross_entropy(&self) -> f64 {
        self.per_parent.iter().map(|p| p.cross_entropy).sum()
    }

    pub fn clust(&self) -> f64 {
        self.per_parent.iter().map(|p| p.clust).sum()
    }

    pub fn sep(&self) -> f64 {
        self.per_parent.iter().map(|p| p.sep).sum()
    }

    pub fn reg(&self) -> f64 {
        self.per_parent.iter().map(|p| p.reg).sum()
    }

    /// Recombines the parts; agrees with `total` up to rounding.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.cross_entropy()
            + w.lambda1 * self.clust()
            + w.lambda2 * self.sep()
            + w.lambda3 * self.reg()
            + self.ceda
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ceda.is_finite()
            && self.per_parent.iter().all(|p| {
                p.cross_entropy.is_finite()
                    && p.clust.is_finite()
                    && p.sep.is_finite()
                    && p.reg.is_finite()
            })
    }
}

/// For each prototype layer and image, the child index the image's label
/// passes through at that parent, or `None` if the path avoids the parent.
pub fn layer_targets(
    taxonomy: &Taxonomy,
    labels: &[HierarchicalLabel],
) -> Result<Vec<Vec<Option<usize>>>> {
    let mut targets = vec![vec![None; labels.len()]; taxonomy.parents().len()];
    for (i, label) in labels.iter().enumerate() {
        let nodes = taxonomy.validate_label(label)?;
        let leaf = *nodes.last().expect("validated label is non-empty");
        for (parent, child) in taxonomy.path_edges(leaf) {
            let k = taxonomy
                .parent_index(parent)
                .expect("edge source is a parent");
            targets[k][i] = Some(child);
        }
    }
    Ok(targets)
}

/// Weight of each (layer, child) in the uniform-target cross-entropy over
/// leaves: the fraction of leaves below that child.
pub fn uniform_leaf_weights(taxonomy: &Taxonomy) -> Vec<Vec<f64>> {
    let l = taxonomy.leaves().len() as f64;
    let mut w: Vec<Vec<f64>> = taxonomy
        .parents()
        .iter()
        .map(|&p| vec![0.0; taxonomy.children(p).len()])
        .collect();
    for &leaf in taxonomy.leaves() {
        for (parent, child) in taxonomy.path_edges(leaf) {
            let k = taxonomy
                .parent_index(parent)
                .expect("edge source is a parent");
            w[k][child] += 1.0 / l;
        }
    }
    w
}

fn class_masks(layer: &PrototypeLayer) -> (Vec<f64>, Vec<f64>) {
    let m = layer.num_prototypes();
    let mut own = vec![0.0; layer.num_children() * m];
    let mut other = vec![0.0; layer.num_children() * m];
    for c in 0..layer.num_children() {
        for j in 0..m {
            if layer.allocation[j] == c {
                own[c * m + j] = 1.0;
            } else {
                other[c * m + j] = 1.0;
            }
        }
    }
    (own, other)
}

/// Sum over images with a target of the min over the chosen prototypes of
/// the min patch distance. `min_dist` is `[N, m]`.
fn min_distance_sum(
    tape: &mut Tape,
    layer: &PrototypeLayer,
    min_dist: Var,
    targets: &[Option<usize>],
    own: bool,
) -> Result<Option<Var>> {
    let m = layer.num_prototypes();
    let mut terms = Vec::new();
    for (n, t) in targets.iter().enumerate() {
        let Some(c) = *t else { continue };
        let idx: Vec<usize> = (0..m)
            .filter(|&j| (layer.allocation[j] == c) == own)
            .map(|j| n * m + j)
            .collect();
        if idx.is_empty() {
            continue;
        }
        terms.push(tape.min_over(min_dist, &idx)?);
    }
    tape.add_all(&terms)
}

/// Cross-entropy of the layer's log-probabilities `[N, C]` against targets.
fn cross_entropy_on(
    tape: &mut Tape,
    log_probs: Var,
    targets: &[Option<usize>],
) -> Result<Option<Var>> {
    let (n, c) = tape.value(log_probs).dims2("log-probabilities")?;
    if targets.len() != n {
        return Err(HpnetError::Dimension(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    let mut w = vec![0.0; n * c];
    let mut any = false;
    for (i, t) in targets.iter().enumerate() {
        if let Some(k) = *t {
            w[i * c + k] = -1.0;
            any = true;
        }
    }
    if !any {
        return Ok(None);
    }
    tape.weighted_sum(log_probs, w).map(Some)
}

/// `Σ own w² + Σ other |w|` on the tape.
fn regularization_on(tape: &mut Tape, layer: &PrototypeLayer, fc: Var) -> Result<Var> {
    let (own, other) = class_masks(layer);
    let sq = tape.square(fc);
    let l2 = tape.weighted_sum(sq, own)?;
    let ab = tape.abs(fc);
    let l1 = tape.weighted_sum(ab, other)?;
    tape.add(l2, l1)
}

/// Terms recorded on a tape together with their values.
pub struct ObjectiveOnTape {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records the full objective for a batch. `targets` comes from
/// [`layer_targets`]; `noise` adds the uniform-target term when present.
pub fn objective_on(
    tape: &mut Tape,
    model: &HpnetModel,
    vars: &ModelVars,
    images: Var,
    targets: &[Vec<Option<usize>>],
    noise: Option<Var>,
    weights: &LossWeights,
) -> Result<ObjectiveOnTape> {
    if targets.len() != model.layers.len() {
        return Err(HpnetError::Dimension(format!(
            "targets for {} layers, model has {}",
            targets.len(),
            model.layers.len()
        )));
    }
    let trace = model.trace(tape, vars, images)?;
    let mut terms = Vec::new();
    let mut per_parent = Vec::with_capacity(model.layers.len());
    let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    for (k, (layer, lt)) in model.layers.iter().zip(&trace.layers).enumerate() {
        let ce = cross_entropy_on(tape, lt.log_probs, &targets[k])?;
        let (min_dist, _) = tape.spatial_min(lt.distances)?;
        let clust = min_distance_sum(tape, layer, min_dist, &targets[k], true)?;
        let sep_pos = min_distance_sum(tape, layer, min_dist, &targets[k], false)?;
        let sep = sep_pos.map(|v| tape.scale(v, -1.0));
        let reg = regularization_on(tape, layer, vars.fc[k])?;
        per_parent.push(ParentLoss {
            parent: layer.parent.clone(),
            cross_entropy: value(tape, ce),
            clust: value(tape, clust),
            sep: value(tape, sep),
            reg: tape.value(reg).item(),
        });
        terms.extend(ce);
        if let Some(c) = clust {
            terms.push(tape.scale(c, weights.lambda1));
        }
        if let Some(s) = sep {
            terms.push(tape.scale(s, weights.lambda2));
        }
        terms.push(tape.scale(reg, weights.lambda3));
    }
    let mut ceda = 0.0;
    if let Some(noise) = noise {
        let v = ceda_on(tape, model, vars, noise)?;
        ceda = tape.value(v).item();
        terms.push(v);
    }
    let total = tape
        .add_all(&terms)?
        .ok_or_else(|| HpnetError::Config("model has no prototype layers".into()))?;
    let breakdown = LossBreakdown {
        per_parent,
        ceda,
        total: tape.value(total).item(),
    };
    Ok(ObjectiveOnTape { total, breakdown })
}

/// Σ over noise images of the cross-entropy between the joint leaf
/// distribution and the uniform distribution over leaves.
pub fn ceda_on(tape: &mut Tape, model: &HpnetModel, vars: &ModelVars, noise: Var) -> Result<Var> {
    let trace = model.trace(tape, vars, noise)?;
    let n = tape.value(noise).shape()[0];
    let leaf_w = uniform_leaf_weights(model.taxonomy());
    let mut terms = Vec::with_capacity(trace.layers.len());
    for (lt, w) in trace.layers.iter().zip(&leaf_w) {
        let weights: Vec<f64> = (0..n).flat_map(|_| w.iter().map(|&x| -x)).collect();
        terms.push(tape.weighted_sum(lt.log_probs, weights)?);
    }
    Ok(tape.add_all(&terms)?.expect("at least one layer"))
}

/// Evaluates the objective without recording gradients.
pub fn loss_breakdown(
    model: &HpnetModel,
    images: &Tensor,
    labels: &[HierarchicalLabel],
    noise: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let targets = layer_targets(model.taxonomy(), labels)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, |_| false);
    let x = tape.constant(images.clone());
    let nz = noise.map(|t| tape.constant(t.clone()));
    Ok(objective_on(&mut tape, model, &vars, x, &targets, nz, weights)?.breakdown)
}

/// `−Σ_i Σ_{parents on path(i)} log P(child_i | parent, x_i)`.
pub fn hierarchical_cross_entropy(
    model: &HpnetModel,
    images: &Tensor,
    labels: &[HierarchicalLabel],
) -> Result<f64> {
    let none = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };
    Ok(loss_breakdown(model, images, labels, None, &none)?.cross_entropy())
}

fn layer_min_distances(layer: &PrototypeLayer, latents: &Tensor) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let z = tape.constant(latents.clone());
    let p = tape.constant(layer.prototypes.clone());
    let d = tape.patch_sq_distances(z, p)?;
    let (min_dist, _) = tape.spatial_min(d)?;
    Ok((tape, min_dist))
}

/// Clust for one layer given latents `[N, D', H, W]` and per-image targets.
pub fn clustering_cost(
    layer: &PrototypeLayer,
    latents: &Tensor,
    targets: &[Option<usize>],
) -> Result<f64> {
    let (mut tape, md) = layer_min_distances(layer, latents)?;
    let v = min_distance_sum(&mut tape, layer, md, targets, true)?;
    Ok(v.map_or(0.0, |v| tape.value(v).item()))
}

/// Sep for one layer (non-positive).
pub fn separation_cost(
    layer: &PrototypeLayer,
    latents: &Tensor,
    targets: &[Option<usize>],
) -> Result<f64> {
    let (mut tape, md) = layer_min_distances(layer, latents)?;
    let v = min_distance_sum(&mut tape, layer, md, targets, false)?;
    Ok(-v.map_or(0.0, |v| tape.value(v).item()))
}

pub fn fc_regularization(layer: &PrototypeLayer) -> f64 {
    let (own, _) = class_masks(layer);
    layer
        .fc
        .data()
        .iter()
        .zip(own)
        .map(|(&w, o)| if o == 1.0 { w * w } else { w.abs() })
        .sum()
}

/// Uniform-target cross-entropy of the model on a noise batch.
pub fn ceda_loss(model: &HpnetModel, noise: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, |_| false);
    let x = tape.constant(noise.clone());
    let v = ceda_on(&mut tape, model, &vars, x)?;
    Ok(tape.value(v).item())
}
