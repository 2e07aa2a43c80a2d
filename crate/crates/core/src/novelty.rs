//! Detecting instances of unseen children of a known parent from the model's
//! logits, evaluated leave-one-class-out.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{HpnetError, Result};
use crate::inference::EVAL_CHUNK;
use crate::model::{ForwardOutput, HpnetModel};
use crate::numerics::{sigmoid, softmax, Tensor};
use crate::taxonomy::{NodeId, Taxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    PbThreshold,
    ScoreSvm,
    LogisticReg,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [
        DetectorKind::PbThreshold,
        DetectorKind::ScoreSvm,
        DetectorKind::LogisticReg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::PbThreshold => "pb_threshold",
            DetectorKind::ScoreSvm => "score_svm",
            DetectorKind::LogisticReg => "logistic_reg",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = HpnetError;
    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| HpnetError::Config(format!("unknown detector kind {s}")))
    }
}

/// Which logits make up the feature vector of a parent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// The parent's child logits followed by the root's (once, for the root).
    #[default]
    ChildAndRoot,
    ChildOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitFeature {
    pub image_id: String,
    pub values: Vec<f64>,
    pub novel: bool,
}

/// Logits of every layer for every image: `[image][layer][child]`.
pub fn dataset_logits(model: &HpnetModel, data: &LabeledDataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(data.len());
    for fo in model.forward_images(&data.images(), EVAL_CHUNK)? {
        let n = fo.latent.shape()[0];
        for i in 0..n {
            out.push(
                fo.layers
                    .iter()
                    .map(|lo| {
                        let c = lo.logits.shape()[1];
                        lo.logits.data()[i * c..(i + 1) * c].to_vec()
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn parent_layer(taxonomy: &Taxonomy, parent: &str) -> Result<(NodeId, usize)> {
    let id = taxonomy
        .find(parent)
        .ok_or_else(|| HpnetError::Novelty(format!("unknown parent {parent}")))?;
    let k = taxonomy
        .parent_index(id)
        .ok_or_else(|| HpnetError::Novelty(format!("{parent} is a leaf, not a parent")))?;
    Ok((id, k))
}

fn feature_from_logits(logits: &[Vec<f64>], k: usize, set: FeatureSet) -> Vec<f64> {
    let mut v = logits[k].clone();
    if set == FeatureSet::ChildAndRoot && k != 0 {
        v.extend_from_slice(&logits[0]);
    }
    v
}

pub fn extract_features(
    model: &HpnetModel,
    data: &LabeledDataset,
    parent: &str,
    novel: bool,
    set: FeatureSet,
) -> Result<Vec<LogitFeature>> {
    let (_, k) = parent_layer(model.taxonomy(), parent)?;
    let logits = dataset_logits(model, data)?;
    Ok(data
        .items
        .iter()
        .zip(&logits)
        .map(|(item, l)| LogitFeature {
            image_id: item.id.clone(),
            values: feature_from_logits(l, k, set),
            novel,
        })
        .collect())
}

/// Largest conditional probability among the first `children` entries.
pub fn max_conditional(values: &[f64], children: usize) -> f64 {
    softmax(&values[..children]).into_iter().fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum DetectorParams {
    /// Novel iff the largest conditional is below `tau`.
    Threshold { tau: f64, children: usize },
    /// Novel iff `w·((x − mean)/scale) + b > 0`.
    Linear {
        weights: Vec<f64>,
        bias: f64,
        mean: Vec<f64>,
        scale: Vec<f64>,
        penalty: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyDetector {
    pub kind: DetectorKind,
    pub parent: String,
    pub params: DetectorParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub is_novel: bool,
    pub p_novel: f64,
}

impl NoveltyDetector {
    /// Affine score for linear detectors; `tau − max conditional` for the
    /// threshold detector. Positive means novel.
    pub fn score(&self, values: &[f64]) -> Result<f64> {
        match &self.params {
            DetectorParams::Threshold { tau, children } => {
                if values.len() < *children {
                    return Err(HpnetError::Dimension(format!(
                        "feature has {} values, detector needs {children}",
                        values.len()
                    )));
                }
                Ok(tau - max_conditional(values, *children))
            }
            DetectorParams::Linear {
                weights,
                bias,
                mean,
                scale,
                ..
            } => {
                if values.len() != weights.len() {
                    return Err(HpnetError::Dimension(format!(
                        "feature has {} values, detector expects {}",
                        values.len(),
                        weights.len()
                    )));
                }
                Ok(bias
                    + values
                        .iter()
                        .zip(weights)
                        .zip(mean.iter().zip(scale))
                        .map(|((x, w), (m, s))| w * (x - m) / s)
                        .sum::<f64>())
            }
        }
    }

    pub fn detect(&self, values: &[f64]) -> Result<Detection> {
        let s = self.score(values)?;
        Ok(match self.params {
            DetectorParams::Threshold { .. } => Detection {
                is_novel: s > 0.0,
                p_novel: if s > 0.0 { 1.0 } else { 0.0 },
            },
            DetectorParams::Linear { .. } => Detection {
                is_novel: s > 0.0,
                p_novel: sigmoid(s),
            },
        })
    }

    pub fn accuracy(&self, features: &[LogitFeature]) -> Result<f64> {
        if features.is_empty() {
            return Err(HpnetError::Novelty("accuracy over no features".into()));
        }
        let mut hits = 0;
        for f in features {
            if self.detect(&f.values)?.is_novel == f.novel {
                hits += 1;
            }
        }
        Ok(hits as f64 / features.len() as f64)
    }
}

pub const PENALTY_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
const GD_ITERS: usize = 1500;

fn standardizer(features: &[LogitFeature]) -> (Vec<f64>, Vec<f64>) {
    let d = features[0].values.len();
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| features.iter().map(|f| f.values[j]).sum::<f64>() / n)
        .collect();
    let scale = (0..d)
        .map(|j| {
            let var = features
                .iter()
                .map(|f| (f.values[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n;
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Full-batch (sub)gradient descent on `mean loss + λ/2·‖w‖²`; returns the
/// iterate with the lowest objective.
fn fit_linear(kind: DetectorKind, xs: &[Vec<f64>], ys: &[f64], penalty: f64) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let objective = |w: &[f64], b: f64| {
        let data: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let m = y * (b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>());
                match kind {
                    DetectorKind::ScoreSvm => (1.0 - m).max(0.0),
                    _ => softplus(-m),
                }
            })
            .sum::<f64>()
            / n;
        data + 0.5 * penalty * w.iter().map(|v| v * v).sum::<f64>()
    };
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let mut best = (objective(&w, b), w.clone(), b);
    for t in 0..GD_ITERS {
        let mut gw: Vec<f64> = w.iter().map(|v| penalty * v).collect();
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let m = y * (b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
            let coef = match kind {
                DetectorKind::ScoreSvm => {
                    if m < 1.0 {
                        -y
                    } else {
                        0.0
                    }
                }
                _ => -y * sigmoid(-m),
            };
            for (g, a) in gw.iter_mut().zip(x) {
                *g += coef * a / n;
            }
            gb += coef / n;
        }
        let eta = match kind {
            DetectorKind::ScoreSvm => 1.0 / ((t + 1) as f64).sqrt(),
            _ => 1.0,
        };
        for (v, g) in w.iter_mut().zip(&gw) {
            *v -= eta * g;
        }
        b -= eta * gb;
        let obj = objective(&w, b);
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
    }
    (best.1, best.2)
}

fn check_two_classes(features: &[LogitFeature], what: &str) -> Result<()> {
    let novel = features.iter().filter(|f| f.novel).count();
    if novel == 0 || novel == features.len() {
        return Err(HpnetError::Novelty(format!(
            "{what} features contain a single class"
        )));
    }
    Ok(())
}

/// Fits a detector on `train`, tuning its one hyperparameter on `holdout`
/// (on `train` itself when `holdout` is empty). `children` is the number of
/// leading feature entries that are the parent's own child logits.
pub fn fit_detector(
    kind: DetectorKind,
    parent: &str,
    children: usize,
    train: &[LogitFeature],
    holdout: &[LogitFeature],
) -> Result<NoveltyDetector> {
    check_two_classes(train, "training")?;
    let tune = if holdout.is_empty() { train } else { holdout };
    let d = train[0].values.len();
    if train.iter().chain(holdout).any(|f| f.values.len() != d) {
        return Err(HpnetError::Dimension("features differ in length".into()));
    }
    if kind == DetectorKind::PbThreshold {
        let mut scores: Vec<f64> = tune
            .iter()
            .map(|f| max_conditional(&f.values, children))
            .collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        let candidates: Vec<f64> = if scores.len() > 1 {
            scores.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        } else {
            scores.clone()
        };
        let mut best: Option<(f64, NoveltyDetector)> = None;
        for tau in candidates {
            let det = NoveltyDetector {
                kind,
                parent: parent.to_string(),
                params: DetectorParams::Threshold {
                    tau: tau.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON),
                    children,
                },
            };
            let acc = det.accuracy(tune)?;
            if best.as_ref().is_none_or(|b| acc > b.0) {
                best = Some((acc, det));
            }
        }
        return Ok(best.expect("at least one candidate").1);
    }
    let (mean, scale) = standardizer(train);
    let xs: Vec<Vec<f64>> = train
        .iter()
        .map(|f| {
            f.values
                .iter()
                .zip(mean.iter().zip(&scale))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        })
        .collect();
    let ys: Vec<f64> = train
        .iter()
        .map(|f| if f.novel { 1.0 } else { -1.0 })
        .collect();
    let mut best: Option<(f64, NoveltyDetector)> = None;
    for penalty in PENALTY_GRID {
        let (weights, bias) = fit_linear(kind, &xs, &ys, penalty);
        let det = NoveltyDetector {
            kind,
            parent: parent.to_string(),
            params: DetectorParams::Linear {
                weights,
                bias,
                mean: mean.clone(),
                scale: scale.clone(),
                penalty,
            },
        };
        let acc = det.accuracy(tune)?;
        if best.as_ref().is_none_or(|b| acc > b.0) {
            best = Some((acc, det));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

fn path_probability(tax: &Taxonomy, out: &ForwardOutput, parent: NodeId) -> f64 {
    tax.path_edges(parent)
        .into_iter()
        .map(|(node, child)| {
            out.layers[tax.parent_index(node).expect("path edges start at parents")].probs[0][child]
        })
        .product()
}

/// Probability of the parent along its path from the root.
pub fn parent_probability(model: &HpnetModel, image: &Tensor, parent: &str) -> Result<f64> {
    let (id, _) = parent_layer(model.taxonomy(), parent)?;
    let out = model.forward(&Tensor::stack(&[image])?)?;
    Ok(path_probability(model.taxonomy(), &out, id))
}

/// Detector output for one image together with the parent's probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NovelChild {
    pub detection: Detection,
    pub parent_probability: f64,
    /// `P(novel child, parent | x) = P(novel | parent, x) · P(parent | x)`.
    pub joint: f64,
}

pub fn novel_child(
    model: &HpnetModel,
    detector: &NoveltyDetector,
    image: &Tensor,
    set: FeatureSet,
) -> Result<NovelChild> {
    let (id, k) = parent_layer(model.taxonomy(), &detector.parent)?;
    let out = model.forward(&Tensor::stack(&[image])?)?;
    let logits: Vec<Vec<f64>> = out
        .layers
        .iter()
        .map(|lo| lo.logits.data()[..lo.logits.shape()[1]].to_vec())
        .collect();
    let detection = detector.detect(&feature_from_logits(&logits, k, set))?;
    let parent_probability = path_probability(model.taxonomy(), &out, id);
    Ok(NovelChild {
        detection,
        parent_probability,
        joint: detection.p_novel * parent_probability,
    })
}

pub fn joint_novel_probability(
    model: &HpnetModel,
    detector: &NoveltyDetector,
    image: &Tensor,
    set: FeatureSet,
) -> Result<f64> {
    Ok(novel_child(model, detector, image, set)?.joint)
}

/// Subsamples the larger side so both sides have equal size, keeping the
/// original order among the survivors.
pub fn balance(features: Vec<LogitFeature>, rng: &mut ChaCha8Rng) -> Vec<LogitFeature> {
    let (novel, familiar): (Vec<_>, Vec<_>) = features.into_iter().partition(|f| f.novel);
    let n = novel.len().min(familiar.len());
    let mut keep = |side: Vec<LogitFeature>| {
        let mut idx: Vec<usize> = (0..side.len()).collect();
        idx.shuffle(rng);
        let mut chosen: Vec<usize> = idx.into_iter().take(n).collect();
        chosen.sort_unstable();
        chosen
            .into_iter()
            .map(|i| side[i].clone())
            .collect::<Vec<_>>()
    };
    let mut out = keep(familiar);
    out.extend(keep(novel));
    out
}

/// Splits off `fraction` of each side (rounded, at least one when a side has
/// two or more) as a holdout set.
fn split_holdout(
    features: Vec<LogitFeature>,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<LogitFeature>, Vec<LogitFeature>) {
    let (mut fit, mut hold) = (Vec::new(), Vec::new());
    for novel in [false, true] {
        let mut side: Vec<LogitFeature> = features
            .iter()
            .filter(|f| f.novel == novel)
            .cloned()
            .collect();
        side.shuffle(rng);
        let h = if side.len() >= 2 {
            ((side.len() as f64 * fraction).round() as usize).clamp(1, side.len() - 1)
        } else {
            0
        };
        hold.extend(side.drain(..h));
        fit.extend(side);
    }
    (fit, hold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_class: String,
    pub train_novel_classes: Vec<String>,
    pub train_size: usize,
    pub holdout_size: usize,
    pub test_familiar: usize,
    pub test_novel: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentReport {
    pub parent: String,
    pub folds: Vec<FoldResult>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocoReport {
    pub kind: DetectorKind,
    pub parents: Vec<ParentReport>,
    /// Parents with fewer than two novel classes.
    pub skipped: Vec<String>,
    pub overall: Option<f64>,
    /// Detectors fitted on all novel classes of each evaluated parent.
    pub detectors: Vec<NoveltyDetector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocoConfig {
    pub feature_set: FeatureSet,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for LocoConfig {
    fn default() -> Self {
        LocoConfig {
            feature_set: FeatureSet::ChildAndRoot,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Novel items grouped by (parent name, novel class name). A novel item's
/// parent is the node named by its label minus the last element.
fn novel_groups(
    tax: &Taxonomy,
    novel: &LabeledDataset,
) -> Result<BTreeMap<String, BTreeMap<String, Vec<usize>>>> {
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (i, item) in novel.items.iter().enumerate() {
        let path = &item.label.path;
        let Some((class, prefix)) = path.split_last() else {
            return Err(HpnetError::Data(format!(
                "novel item {} has an empty label",
                item.id
            )));
        };
        let parent = match prefix.last() {
            Some(p) => p.clone(),
            None => tax.name(tax.root()).to_string(),
        };
        if tax.find(class).is_some() {
            return Err(HpnetError::Data(format!(
                "novel item {} is labeled with known class {class}",
                item.id
            )));
        }
        groups
            .entry(parent)
            .or_default()
            .entry(class.clone())
            .or_default()
            .push(i);
    }
    Ok(groups)
}

fn under(tax: &Taxonomy, label_path: &[String], parent: NodeId) -> bool {
    parent == tax.root() || label_path.iter().any(|n| tax.find(n) == Some(parent))
}

/// Leave-one-class-out evaluation of one detector kind at every parent that
/// has at least two novel classes.
pub fn loco_evaluate(
    model: &HpnetModel,
    kind: DetectorKind,
    familiar_train: &LabeledDataset,
    familiar_test: &LabeledDataset,
    novel: &LabeledDataset,
    config: &LocoConfig,
) -> Result<LocoReport> {
    let tax = model.taxonomy();
    let groups = novel_groups(tax, novel)?;
    let train_logits = dataset_logits(model, familiar_train)?;
    let test_logits = dataset_logits(model, familiar_test)?;
    let novel_logits = dataset_logits(model, novel)?;
    let mut report = LocoReport {
        kind,
        parents: Vec::new(),
        skipped: Vec::new(),
        overall: None,
        detectors: Vec::new(),
    };
    for (parent, classes) in &groups {
        let (pid, k) = parent_layer(tax, parent)?;
        if classes.len() < 2 {
            log::warn!(
                "parent {parent} has {} novel class(es); skipped",
                classes.len()
            );
            report.skipped.push(parent.clone());
            continue;
        }
        let children = tax.children(pid).len();
        let feats = |data: &LabeledDataset,
                     logits: &[Vec<Vec<f64>>],
                     idx: &mut dyn Iterator<Item = usize>,
                     novel: bool| {
            idx.map(|i| LogitFeature {
                image_id: data.items[i].id.clone(),
                values: feature_from_logits(&logits[i], k, config.feature_set),
                novel,
            })
            .collect::<Vec<_>>()
        };
        let fam_train = feats(
            familiar_train,
            &train_logits,
            &mut (0..familiar_train.len())
                .filter(|&i| under(tax, &familiar_train.items[i].label.path, pid)),
            false,
        );
        let fam_test = feats(
            familiar_test,
            &test_logits,
            &mut (0..familiar_test.len())
                .filter(|&i| under(tax, &familiar_test.items[i].label.path, pid)),
            false,
        );
        let mut folds = Vec::new();
        for (f, (test_class, test_idx)) in classes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ (f as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ hash_name(parent),
            );
            let mut train = fam_train.clone();
            let others: Vec<String> = classes
                .keys()
                .filter(|c| *c != test_class)
                .cloned()
                .collect();
            for c in &others {
                train.extend(feats(
                    novel,
                    &novel_logits,
                    &mut classes[c].iter().copied(),
                    true,
                ));
            }
            let train = balance(train, &mut rng);
            let (fit, hold) = split_holdout(train, config.holdout_fraction, &mut rng);
            let mut test = fam_test.clone();
            test.extend(feats(
                novel,
                &novel_logits,
                &mut test_idx.iter().copied(),
                true,
            ));
            let test = balance(test, &mut rng);
            let det = fit_detector(kind, parent, children, &fit, &hold)?;
            let accuracy = det.accuracy(&test)?;
            folds.push(FoldResult {
                test_class: test_class.clone(),
                train_novel_classes: others,
                train_size: fit.len(),
                holdout_size: hold.len(),
                test_familiar: test.iter().filter(|t| !t.novel).count(),
                test_novel: test.iter().filter(|t| t.novel).count(),
                accuracy,
            });
        }
        let accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
        // a deployable detector sees every novel class of this parent
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ hash_name(parent));
        let mut all = fam_train.clone();
        for idx in classes.values() {
            all.extend(feats(novel, &novel_logits, &mut idx.iter().copied(), true));
        }
        let (fit, hold) = split_holdout(balance(all, &mut rng), config.holdout_fraction, &mut rng);
        report
            .detectors
            .push(fit_detector(kind, parent, children, &fit, &hold)?);
        report.parents.push(ParentReport {
            parent: parent.clone(),
            folds,
            accuracy,
        });
    }
    if !report.parents.is_empty() {
        report.overall = Some(
            report.parents.iter().map(|p| p.accuracy).sum::<f64>() / report.parents.len() as f64,
        );
    }
    Ok(report)
}

fn hash_name(name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Detector parameters stored next to a checkpoint, keyed by its digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltySidecar {
    pub checkpoint_sha256: String,
    pub feature_set: FeatureSet,
    pub detectors: Vec<NoveltyDetector>,
}

impl NoveltySidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| HpnetError::io(path, e))
    }

    /// Loads and checks that the sidecar belongs to the checkpoint with
    /// digest `checkpoint_sha256`.
    pub fn load(path: &Path, checkpoint_sha256: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HpnetError::io(path, e))?;
        let s: NoveltySidecar = serde_json::from_str(&text)?;
        if s.checkpoint_sha256 != checkpoint_sha256 {
            return Err(HpnetError::Novelty(format!(
                "sidecar {} belongs to checkpoint {}, not {checkpoint_sha256}",
                path.display(),
                s.checkpoint_sha256
            )));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledItem, Split};
    use crate::model::{BackboneConfig, ModelConfig};
    use crate::taxonomy::HierarchicalLabel;

    const TAX: &str = r#"{"name":"root","children":[
        {"name":"vehicle","children":[{"name":"ambulance"},{"name":"pickup"},{"name":"sports_car"}]},
        {"name":"animal","children":[{"name":"cat"},{"name":"dog"}]}]}"#;

    fn model(seed: u64) -> HpnetModel {
        let config = ModelConfig {
            backbone: BackboneConfig::tiny(8),
            prototypes_per_class: 2,
            epsilon: 1e-4,
        };
        HpnetModel::new(config, Taxonomy::parse(TAX).unwrap(), seed).unwrap()
    }

    fn dataset(split: Split, labels: &[(&str, &str)], per: usize, seed: u64) -> LabeledDataset {
        let mut items = Vec::new();
        for (c, f) in labels {
            for i in 0..per {
                let h = hash_name(&format!("{seed}/{f}/{i}"));
                items.push(LabeledItem {
                    id: format!("{}/{f}/{i}", split.as_str()),
                    image: Tensor::from_fn(&[3, 8, 8], |j| ((h >> (j % 61)) & 0xff) as f64 / 255.0),
                    label: HierarchicalLabel::new([*c, *f]),
                });
            }
        }
        LabeledDataset::new(split, items)
    }

    fn feat(values: Vec<f64>, novel: bool) -> LogitFeature {
        LogitFeature {
            image_id: String::new(),
            values,
            novel,
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn feature_layout() {
        let m = model(1);
        let data = dataset(Split::Test, &[("vehicle", "pickup")], 2, 0);
        let mut dup = data.clone();
        dup.items[1].image = dup.items[0].image.clone();
        let f = extract_features(&m, &dup, "vehicle", false, FeatureSet::ChildAndRoot).unwrap();
        assert_eq!(f[0].values, f[1].values);
        assert_eq!(f[0].values.len(), 3 + 2);
        let r = extract_features(&m, &data, "root", false, FeatureSet::ChildAndRoot).unwrap();
        assert_eq!(r[0].values.len(), 2);
        let c = extract_features(&m, &data, "animal", false, FeatureSet::ChildOnly).unwrap();
        assert_eq!(c[0].values.len(), 2);
        assert!(extract_features(&m, &data, "cat", false, FeatureSet::ChildOnly).is_err());
    }

    #[test]
    fn uniform_model_gives_reciprocal_fanout() {
        let mut m = model(2);
        for l in &mut m.layers {
            l.fc = Tensor::zeros(l.fc.shape());
        }
        let data = dataset(Split::Test, &[("vehicle", "pickup")], 1, 0);
        let f = extract_features(&m, &data, "vehicle", false, FeatureSet::ChildAndRoot).unwrap();
        assert!((max_conditional(&f[0].values, 3) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_scan_on_separable_scores() {
        let fam: Vec<_> = [0.9, 0.95]
            .iter()
            .map(|&p| feat(vec![logit(p), 0.0], false))
            .collect();
        let nov: Vec<_> = [0.4, 0.5]
            .iter()
            .map(|&p| feat(vec![logit(p), 0.0], true))
            .collect();
        // max conditional of [logit(0.4), 0] is 0.6
        let all: Vec<_> = fam.iter().chain(&nov).cloned().collect();
        let d = fit_detector(DetectorKind::PbThreshold, "p", 2, &all, &all).unwrap();
        let DetectorParams::Threshold { tau, .. } = d.params else {
            panic!()
        };
        assert!(tau > 0.6 && tau < 0.9, "{tau}");
        assert_eq!(d.accuracy(&all).unwrap(), 1.0);
        // the scan uses midpoints of sorted distinct holdout scores
        assert!((tau - 0.75).abs() < 1e-12);
    }

    #[test]
    fn threshold_detection_semantics() {
        let d = NoveltyDetector {
            kind: DetectorKind::PbThreshold,
            parent: "p".into(),
            params: DetectorParams::Threshold {
                tau: 0.8,
                children: 2,
            },
        };
        let fam = d.detect(&[logit(0.9), 0.0]).unwrap();
        assert_eq!((fam.is_novel, fam.p_novel), (false, 0.0));
        let nov = d.detect(&[logit(0.6), 0.0]).unwrap();
        assert_eq!((nov.is_novel, nov.p_novel), (true, 1.0));
    }

    #[test]
    fn logistic_output_is_monotone_sigmoid() {
        let mut d = NoveltyDetector {
            kind: DetectorKind::LogisticReg,
            parent: "p".into(),
            params: DetectorParams::Linear {
                weights: vec![0.0, 0.0],
                bias: 0.0,
                mean: vec![0.0; 2],
                scale: vec![1.0; 2],
                penalty: 0.0,
            },
        };
        assert_eq!(d.detect(&[3.0, -1.0]).unwrap().p_novel, 0.5);
        if let DetectorParams::Linear { weights, .. } = &mut d.params {
            *weights = vec![1.5, -0.5];
        }
        let mut last = 0.0;
        for x in -20..=20 {
            let p = d.detect(&[x as f64 * 0.3, 0.0]).unwrap().p_novel;
            assert!(p >= last);
            last = p;
        }
        assert!(d.detect(&[1.0, 2.0, 3.0]).is_err());
    }

    fn clouds() -> Vec<LogitFeature> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut out = Vec::new();
        for i in 0..40 {
            let novel = i % 2 == 0;
            let c = if novel { [2.0, 2.0] } else { [-2.0, -1.0] };
            out.push(feat(
                vec![
                    c[0] + rand::Rng::gen_range(&mut rng, -1.0..1.0),
                    c[1] + rand::Rng::gen_range(&mut rng, -1.0..1.0),
                ],
                novel,
            ));
        }
        out
    }

    #[test]
    fn linear_detectors_separate_separable_clouds() {
        let data = clouds();
        for kind in [DetectorKind::ScoreSvm, DetectorKind::LogisticReg] {
            let d = fit_detector(kind, "p", 2, &data, &[]).unwrap();
            assert_eq!(d.accuracy(&data).unwrap(), 1.0, "{kind}");
        }
    }

    /// Best accuracy of any linear rule on the points, by brute force over
    /// directions and thresholds.
    fn best_linear(points: &[([f64; 2], bool)]) -> f64 {
        let mut best: f64 = 0.0;
        for a in 0..720 {
            let th = a as f64 * std::f64::consts::PI / 360.0;
            let (u, v) = (th.cos(), th.sin());
            let mut proj: Vec<f64> = points.iter().map(|(p, _)| u * p[0] + v * p[1]).collect();
            proj.sort_by(f64::total_cmp);
            let mut cuts = vec![proj[0] - 1.0, proj[proj.len() - 1] + 1.0];
            cuts.extend(proj.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            for c in cuts {
                let hits = points
                    .iter()
                    .filter(|(p, y)| (u * p[0] + v * p[1] > c) == *y)
                    .count();
                best = best.max(hits as f64 / points.len() as f64);
            }
        }
        best
    }

    #[test]
    fn xor_defeats_linear_detectors() {
        let pts = [
            ([0.0, 0.0], false),
            ([1.0, 1.0], false),
            ([0.0, 1.0], true),
            ([1.0, 0.0], true),
        ];
        let oracle = best_linear(&pts);
        assert_eq!(oracle, 0.75);
        let data: Vec<_> = pts.iter().map(|(p, y)| feat(p.to_vec(), *y)).collect();
        for kind in [DetectorKind::ScoreSvm, DetectorKind::LogisticReg] {
            let d = fit_detector(kind, "p", 2, &data, &[]).unwrap();
            assert!(d.accuracy(&data).unwrap() <= oracle, "{kind}");
        }
    }

    #[test]
    fn single_class_training_is_error() {
        let data = vec![feat(vec![0.0, 1.0], false), feat(vec![1.0, 0.0], false)];
        for kind in DetectorKind::ALL {
            assert!(fit_detector(kind, "p", 2, &data, &[]).is_err());
        }
    }

    #[test]
    fn joint_probability_is_a_product() {
        let m = model(4);
        let data = dataset(Split::Test, &[("vehicle", "pickup")], 1, 5);
        let img = &data.items[0].image;
        assert_eq!(parent_probability(&m, img, "root").unwrap(), 1.0);
        let pv = parent_probability(&m, img, "vehicle").unwrap();
        let root = m.forward(&Tensor::stack(&[img]).unwrap()).unwrap().layers[0].probs[0].clone();
        assert!((pv - root[0]).abs() < 1e-15);
        let d = NoveltyDetector {
            kind: DetectorKind::LogisticReg,
            parent: "vehicle".into(),
            params: DetectorParams::Linear {
                weights: vec![0.0; 5],
                bias: logit(0.7),
                mean: vec![0.0; 5],
                scale: vec![1.0; 5],
                penalty: 0.0,
            },
        };
        let j = joint_novel_probability(&m, &d, img, FeatureSet::ChildAndRoot).unwrap();
        assert!((j - 0.7 * pv).abs() < 1e-12);
        // a parent the model rules out gives zero regardless of the detector
        let mut sure = m.clone();
        sure.layers[0].fc =
            Tensor::new(vec![2, 4], vec![-1e6, -1e6, -1e6, -1e6, 1e6, 1e6, 1e6, 1e6]).unwrap();
        assert_eq!(
            joint_novel_probability(&sure, &d, img, FeatureSet::ChildAndRoot).unwrap(),
            0.0
        );
    }

    #[test]
    fn balance_is_exact_and_seeded() {
        let data: Vec<_> = (0..7).map(|i| feat(vec![i as f64], i < 2)).collect();
        let a = balance(data.clone(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.iter().filter(|f| f.novel).count(), 2);
        assert_eq!(a.iter().filter(|f| !f.novel).count(), 2);
        assert_eq!(a, balance(data, &mut ChaCha8Rng::seed_from_u64(1)));
    }

    #[test]
    fn loco_folds_and_balance() {
        let m = model(6);
        let fam = [
            ("vehicle", "ambulance"),
            ("vehicle", "pickup"),
            ("vehicle", "sports_car"),
            ("animal", "cat"),
            ("animal", "dog"),
        ];
        let train = dataset(Split::Train, &fam, 6, 1);
        let test = dataset(Split::Test, &fam, 3, 2);
        let novel = dataset(
            Split::Novel,
            &[
                ("vehicle", "cab"),
                ("vehicle", "forklift"),
                ("vehicle", "tractor"),
                ("vehicle", "mountain_bike"),
                ("animal", "deer"),
            ],
            4,
            3,
        );
        let cfg = LocoConfig::default();
        let r = loco_evaluate(&m, DetectorKind::LogisticReg, &train, &test, &novel, &cfg).unwrap();
        assert_eq!(r.skipped, ["animal"]);
        assert_eq!(r.parents.len(), 1);
        let p = &r.parents[0];
        assert_eq!(p.folds.len(), 4);
        for f in &p.folds {
            assert_eq!(f.test_familiar, f.test_novel);
            assert_eq!(f.test_novel, 4);
            assert!(!f.train_novel_classes.contains(&f.test_class));
            assert_eq!(f.train_novel_classes.len(), 3);
        }
        assert_eq!(r.overall, Some(p.accuracy));
        assert_eq!(r.detectors.len(), 1);
        let again =
            loco_evaluate(&m, DetectorKind::LogisticReg, &train, &test, &novel, &cfg).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn sidecar_is_keyed_to_the_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("novelty.json");
        let s = NoveltySidecar {
            checkpoint_sha256: "abc".into(),
            feature_set: FeatureSet::ChildAndRoot,
            detectors: vec![NoveltyDetector {
                kind: DetectorKind::PbThreshold,
                parent: "vehicle".into(),
                params: DetectorParams::Threshold {
                    tau: 0.5,
                    children: 3,
                },
            }],
        };
        s.save(&path).unwrap();
        assert_eq!(NoveltySidecar::load(&path, "abc").unwrap(), s);
        assert!(NoveltySidecar::load(&path, "abd").is_err());
    }
}
