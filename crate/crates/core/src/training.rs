//! The alternating schedule: a warm-up with frozen evidence weights, joint
//! optimization of every layer, periodic projection of prototypes onto
//! training patches, and convex optimization of the evidence weights.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_crop, noise_batch, CropMode, LabeledDataset};
use crate::error::{HpnetError, Result};
use crate::inference::{dataset_latents, fine_accuracy, nearest_patch, predict_images, EVAL_CHUNK};
use crate::model::{HpnetModel, ParamGroup, PrototypeLayer};
use crate::numerics::{softmax, SgdOptimizer, Tape, Tensor};
use crate::objective::{
    fc_regularization, layer_targets, objective_on, LossBreakdown, LossWeights, ParentLoss,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs_conv: usize,
    pub epochs_all: usize,
    pub epochs_convex: usize,
    pub epochs_convex_final: usize,
    pub projection_period: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs_conv: 5,
            epochs_all: 45,
            epochs_convex: 2,
            epochs_convex_final: 10,
            projection_period: 5,
        }
    }
}

impl TrainSchedule {
    pub fn total_epochs(&self) -> usize {
        self.epochs_conv + self.epochs_all
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(HpnetError::Config("schedule has no training epochs".into()));
        }
        if self.projection_period == 0 {
            return Err(HpnetError::Config(
                "projection period must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Epochs (1-based) after which projection and convex optimization run:
    /// every `projection_period` epochs from the end of the warm-up on, and
    /// always after the last epoch.
    pub fn projection_epochs(&self) -> Vec<usize> {
        let total = self.total_epochs();
        (1..=total)
            .filter(|&e| e == total || (e >= self.epochs_conv && e % self.projection_period == 0))
            .collect()
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch <= self.epochs_conv {
            Phase::Conv
        } else {
            Phase::All
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Conv,
    All,
    Convex,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Conv => "conv",
            Phase::All => "all",
            Phase::Convex => "convex",
        })
    }
}

impl Phase {
    fn trains(self, group: ParamGroup) -> bool {
        match self {
            Phase::Conv => group != ParamGroup::Fc,
            Phase::All => true,
            Phase::Convex => group == ParamGroup::Fc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub lr_conv: f64,
    pub lr_all: f64,
    pub lr_convex: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Proximal gradient steps per convex epoch.
    pub convex_steps: usize,
    /// Pair every batch with as many uniform-noise images.
    pub ceda: bool,
    /// Random resized crops on training images.
    pub augment: bool,
    /// Stop after this many projection cycles without improvement.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: TrainSchedule::default(),
            weights: LossWeights::default(),
            lr_conv: 1e-3,
            lr_all: 1e-4,
            lr_convex: 1e-2,
            momentum: 0.9,
            batch_size: 16,
            convex_steps: 20,
            ceda: true,
            augment: false,
            patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        for (name, v) in [
            ("lr_conv", self.lr_conv),
            ("lr_all", self.lr_all),
            ("lr_convex", self.lr_convex),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(HpnetError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HpnetError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.convex_steps == 0 {
            return Err(HpnetError::Config(
                "batch size and convex steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub val_fine_acc: Option<f64>,
}

pub const LOG_HEADER: &str =
    "epoch,phase,loss_total,loss_ce,loss_clust,loss_sep,loss_reg,loss_ceda,val_fine_acc";

impl LogLine {
    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            l.total,
            l.cross_entropy(),
            l.clust(),
            l.sep(),
            l.reg(),
            l.ceda,
            self.val_fine_acc.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

pub fn format_log(lines: &[LogLine]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for l in lines {
        s.push_str(&l.to_csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub parent: String,
    pub prototype: usize,
    pub class: String,
    pub image_id: String,
    pub image_index: usize,
    pub row: usize,
    pub col: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub epoch: usize,
    pub records: Vec<ProjectionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub phase: Phase,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub cycles_since_improvement: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model at the projection cycle with the best validation fine accuracy.
    pub best: HpnetModel,
    /// Model after the last completed epoch.
    pub last: HpnetModel,
    pub log: Vec<LogLine>,
    pub projections: Vec<ProjectionReport>,
    pub state: TrainState,
}

impl TrainOutcome {
    /// Projection report belonging to the returned best model.
    pub fn best_projection(&self) -> Option<&ProjectionReport> {
        let e = self.state.best_epoch?;
        self.projections.iter().find(|p| p.epoch == e)
    }
}

fn add_breakdown(acc: &mut Option<LossBreakdown>, b: LossBreakdown) {
    match acc {
        None => *acc = Some(b),
        Some(a) => {
            for (p, q) in a.per_parent.iter_mut().zip(b.per_parent) {
                p.cross_entropy += q.cross_entropy;
                p.clust += q.clust;
                p.sep += q.sep;
                p.reg += q.reg;
            }
            a.ceda += b.ceda;
            a.total += b.total;
        }
    }
}

fn column_slice(targets: &[Vec<Option<usize>>], idx: &[usize]) -> Vec<Vec<Option<usize>>> {
    targets
        .iter()
        .map(|t| idx.iter().map(|&i| t[i]).collect())
        .collect()
}

/// Gradient-based epochs over a dataset, holding optimizer state and the RNG.
pub struct Trainer {
    config: TrainConfig,
    rng: ChaCha8Rng,
    conv_opt: SgdOptimizer,
    all_opt: SgdOptimizer,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            conv_opt: SgdOptimizer::new(config.lr_conv, config.momentum)?,
            all_opt: SgdOptimizer::new(config.lr_all, config.momentum)?,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self, phase: Phase) -> &SgdOptimizer {
        match phase {
            Phase::Conv => &self.conv_opt,
            _ => &self.all_opt,
        }
    }

    /// One pass over `data` in seeded random order; returns the summed
    /// per-batch loss breakdown.
    pub fn epoch(
        &mut self,
        model: &mut HpnetModel,
        data: &LabeledDataset,
        targets: &[Vec<Option<usize>>],
        phase: Phase,
        epoch: usize,
    ) -> Result<LossBreakdown> {
        if phase == Phase::Convex {
            return Err(HpnetError::Config(
                "convex epochs run through convex_optimize_fc".into(),
            ));
        }
        if data.is_empty() {
            return Err(HpnetError::Data("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let size = model.config().backbone.input_size;
        let mut acc = None;
        for idx in order.chunks(self.config.batch_size) {
            let (mut images, _) = data.batch(idx)?;
            if self.config.augment {
                let crops: Vec<Tensor> = (0..idx.len())
                    .map(|i| {
                        augment_crop(&images.slice_outer(i), CropMode::Train, size, &mut self.rng)
                    })
                    .collect();
                images = Tensor::stack(&crops.iter().collect::<Vec<_>>())?;
            }
            let noise = self
                .config
                .ceda
                .then(|| noise_batch(images.shape(), &mut self.rng));
            let batch_targets = column_slice(targets, idx);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, |g| phase.trains(g));
            let x = tape.constant(images);
            let nz = noise.map(|n| tape.constant(n));
            let obj = objective_on(
                &mut tape,
                model,
                &vars,
                x,
                &batch_targets,
                nz,
                &self.config.weights,
            )?;
            if !obj.breakdown.is_finite() {
                return Err(HpnetError::Training {
                    epoch,
                    phase: phase.to_string(),
                    message: format!("non-finite loss: {:?}", obj.breakdown),
                });
            }
            tape.backward(obj.total)?;
            let opt = match phase {
                Phase::Conv => &mut self.conv_opt,
                _ => &mut self.all_opt,
            };
            for ((name, group, tensor), var) in model.parameters_mut().into_iter().zip(vars.all()) {
                opt.set_frozen(&name, !phase.trains(group));
                let grad = tape.grad_or_zeros(var);
                opt.step(&name, tensor, &grad)?;
            }
            add_breakdown(&mut acc, obj.breakdown);
        }
        // data terms add up over batches; Reg is reported once, at epoch end
        let mut loss = acc.expect("non-empty dataset");
        for (p, layer) in loss.per_parent.iter_mut().zip(&model.layers) {
            p.reg = fc_regularization(layer);
        }
        loss.total = loss.weighted_total(&self.config.weights);
        Ok(loss)
    }
}

/// Runs the warm-up phase for `epochs` epochs: evidence weights stay fixed.
pub fn run_phase_conv(
    model: &mut HpnetModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<LossBreakdown>> {
    run_phase(model, data, config, Phase::Conv, epochs)
}

/// Runs `epochs` epochs with every layer trainable.
pub fn run_phase_all(
    model: &mut HpnetModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<LossBreakdown>> {
    run_phase(model, data, config, Phase::All, epochs)
}

fn run_phase(
    model: &mut HpnetModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    phase: Phase,
    epochs: usize,
) -> Result<Vec<LossBreakdown>> {
    let targets = layer_targets(model.taxonomy(), &data.labels())?;
    let mut trainer = Trainer::new(config.clone())?;
    (1..=epochs)
        .map(|e| trainer.epoch(model, data, &targets, phase, e))
        .collect()
}

/// Nearest patch to `proto` over the candidate images, scanned in the given
/// order; the first strict minimum wins, so ties go to the earliest image and
/// then the lowest (row, col).
pub fn nearest_source_patch(
    latents: &[Tensor],
    candidates: impl IntoIterator<Item = usize>,
    proto: &[f64],
) -> Option<(f64, usize, usize, usize)> {
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for i in candidates {
        let (d, r, c) = nearest_patch(&latents[i], proto);
        if best.is_none_or(|b| d < b.0) {
            best = Some((d, i, r, c));
        }
    }
    best
}

/// Replaces every prototype by the nearest latent patch among training images
/// of its allocated class. Ties go to the lowest (image id, row, col).
pub fn project_prototypes(
    model: &mut HpnetModel,
    data: &LabeledDataset,
    epoch: usize,
) -> Result<ProjectionReport> {
    let targets = layer_targets(model.taxonomy(), &data.labels())?;
    let latents = dataset_latents(model, data)?;
    let mut by_id: Vec<usize> = (0..data.len()).collect();
    by_id.sort_by(|&a, &b| data.items[a].id.cmp(&data.items[b].id));
    let tax = model.taxonomy().clone();
    let mut records = Vec::new();
    for (k, layer) in model.layers.iter_mut().enumerate() {
        let parent = tax.parents()[k];
        for j in 0..layer.num_prototypes() {
            let c = layer.allocation[j];
            let class = tax.name(tax.children(parent)[c]).to_string();
            let candidates = by_id.iter().copied().filter(|&i| targets[k][i] == Some(c));
            let best = nearest_source_patch(&latents, candidates, layer.prototype(j));
            let Some((distance, i, row, col)) = best else {
                return Err(HpnetError::Data(format!(
                    "class {class} has no training images to project prototypes onto"
                )));
            };
            let z = &latents[i];
            let (d, w) = (z.shape()[0], z.shape()[2]);
            let hw = z.shape()[1] * w;
            let patch: Vec<f64> = (0..d).map(|q| z.data()[q * hw + row * w + col]).collect();
            layer.prototypes.data_mut()[j * d..(j + 1) * d].copy_from_slice(&patch);
            records.push(ProjectionRecord {
                parent: layer.parent.clone(),
                prototype: j,
                class: class.clone(),
                image_id: data.items[i].id.clone(),
                image_index: i,
                row,
                col,
                distance,
            });
        }
    }
    model.meta.projections += 1;
    Ok(ProjectionReport { epoch, records })
}

/// `Σ_i −log softmax(W s_i)[t_i] + λ Σ_own w²` and its gradient.
fn smooth_part(
    layer: &PrototypeLayer,
    w: &[f64],
    scores: &[Vec<f64>],
    targets: &[Option<usize>],
    lambda: f64,
) -> (f64, Vec<f64>) {
    let (c, m) = (layer.num_children(), layer.num_prototypes());
    let mut loss = 0.0;
    let mut grad = vec![0.0; c * m];
    for (s, t) in scores.iter().zip(targets) {
        let Some(t) = *t else { continue };
        let logits: Vec<f64> = (0..c)
            .map(|ci| {
                w[ci * m..(ci + 1) * m]
                    .iter()
                    .zip(s)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let p = softmax(&logits);
        loss -= p[t].ln();
        for ci in 0..c {
            let g = p[ci] - if ci == t { 1.0 } else { 0.0 };
            for (gj, sj) in grad[ci * m..(ci + 1) * m].iter_mut().zip(s) {
                *gj += g * sj;
            }
        }
    }
    for ci in 0..c {
        for j in 0..m {
            if layer.allocation[j] == ci {
                let v = w[ci * m + j];
                loss += lambda * v * v;
                grad[ci * m + j] += 2.0 * lambda * v;
            }
        }
    }
    (loss, grad)
}

fn l1_part(layer: &PrototypeLayer, w: &[f64], lambda: f64) -> f64 {
    let m = layer.num_prototypes();
    w.iter()
        .enumerate()
        .filter(|(i, _)| layer.allocation[i % m] != i / m)
        .map(|(_, v)| lambda * v.abs())
        .sum()
}

/// Minimizes the layer's cross-entropy plus `λ·Reg` over its evidence weights
/// alone, with scores held fixed, by proximal gradient descent with
/// backtracking. Returns the objective after each epoch (non-increasing).
pub fn convex_fit_layer(
    layer: &mut PrototypeLayer,
    scores: &[Vec<f64>],
    targets: &[Option<usize>],
    lambda: f64,
    lr: f64,
    steps: usize,
    epochs: usize,
) -> Vec<f64> {
    let m = layer.num_prototypes();
    let mut w = layer.fc.data().to_vec();
    let mut eta = lr;
    let objective =
        |w: &[f64]| smooth_part(layer, w, scores, targets, lambda).0 + l1_part(layer, w, lambda);
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        for _ in 0..steps {
            let (f0, g) = smooth_part(layer, &w, scores, targets, lambda);
            loop {
                let cand: Vec<f64> = w
                    .iter()
                    .zip(&g)
                    .enumerate()
                    .map(|(i, (&wi, &gi))| {
                        let v = wi - eta * gi;
                        if layer.allocation[i % m] != i / m {
                            v.signum() * (v.abs() - eta * lambda).max(0.0)
                        } else {
                            v
                        }
                    })
                    .collect();
                let (f1, _) = smooth_part(layer, &cand, scores, targets, lambda);
                let (mut lin, mut sq) = (0.0, 0.0);
                for ((a, b), gi) in cand.iter().zip(&w).zip(&g) {
                    lin += gi * (a - b);
                    sq += (a - b) * (a - b);
                }
                if f1 <= f0 + lin + sq / (2.0 * eta) || eta < 1e-12 {
                    if f1 + l1_part(layer, &cand, lambda) <= f0 + l1_part(layer, &w, lambda) {
                        w = cand;
                    }
                    break;
                }
                eta *= 0.5;
            }
        }
        history.push(objective(&w));
    }
    layer.fc = Tensor::new(layer.fc.shape().to_vec(), w).expect("same shape");
    history
}

/// Per-layer similarity scores of every image, as rows.
fn dataset_scores(model: &HpnetModel, data: &LabeledDataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = vec![Vec::with_capacity(data.len()); model.layers.len()];
    for fo in model.forward_images(&data.images(), EVAL_CHUNK)? {
        for (k, lo) in fo.layers.iter().enumerate() {
            let m = lo.scores.shape()[1];
            out[k].extend(lo.scores.data().chunks_exact(m).map(<[f64]>::to_vec));
        }
    }
    Ok(out)
}

/// Convex optimization of every evidence layer; everything else stays fixed.
/// Returns per-epoch (CE, Reg) per layer, outer index epoch.
pub fn convex_optimize_fc(
    model: &mut HpnetModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let targets = layer_targets(model.taxonomy(), &data.labels())?;
    let scores = dataset_scores(model, data)?;
    let lambda = config.weights.lambda3;
    let mut per_epoch = vec![Vec::with_capacity(model.layers.len()); epochs];
    for (k, layer) in model.layers.iter_mut().enumerate() {
        for row in per_epoch.iter_mut() {
            convex_fit_layer(
                layer,
                &scores[k],
                &targets[k],
                lambda,
                config.lr_convex,
                config.convex_steps,
                1,
            );
            row.push(split_objective(layer, &scores[k], &targets[k]));
        }
    }
    Ok(per_epoch)
}

/// (cross-entropy, Reg) of a layer on fixed scores.
fn split_objective(
    layer: &PrototypeLayer,
    scores: &[Vec<f64>],
    targets: &[Option<usize>],
) -> (f64, f64) {
    let w = layer.fc.data();
    let (with_reg, _) = smooth_part(layer, w, scores, targets, 1.0);
    let (ce, _) = smooth_part(layer, w, scores, targets, 0.0);
    let reg = with_reg - ce + l1_part(layer, w, 1.0);
    (ce, reg)
}

/// Loss breakdown over a whole dataset without noise, evaluated in chunks.
pub fn dataset_loss(
    model: &HpnetModel,
    data: &LabeledDataset,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let targets = layer_targets(model.taxonomy(), &data.labels())?;
    let mut acc = None;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, _) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, |_| false);
        let x = tape.constant(images);
        let obj = objective_on(
            &mut tape,
            model,
            &vars,
            x,
            &column_slice(&targets, chunk),
            None,
            weights,
        )?;
        add_breakdown(&mut acc, obj.breakdown);
    }
    acc.ok_or_else(|| HpnetError::Data("loss over an empty dataset".into()))
}

/// The full schedule. Validation fine accuracy is measured after every
/// convex phase; the best such model is returned.
pub fn train(
    model: HpnetModel,
    train_data: &LabeledDataset,
    val_data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_data, val_data, config, |_, _| Ok(()))
}

/// [`train`], calling `on_projection` with the model right after each
/// projection step.
pub fn train_with(
    model: HpnetModel,
    train_data: &LabeledDataset,
    val_data: &LabeledDataset,
    config: &TrainConfig,
    mut on_projection: impl FnMut(&HpnetModel, &ProjectionReport) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    train_data.validate(model.taxonomy())?;
    let mut model = model;
    model.meta.seed = config.seed;
    let targets = layer_targets(model.taxonomy(), &train_data.labels())?;
    let mut trainer = Trainer::new(config.clone())?;
    let schedule = config.schedule;
    let projection_epochs = schedule.projection_epochs();
    let total = schedule.total_epochs();
    let mut log = Vec::new();
    let mut projections = Vec::new();
    let mut best: Option<HpnetModel> = None;
    let mut state = TrainState {
        epoch: 0,
        phase: schedule.phase_of(1),
        best_val_acc: None,
        best_epoch: None,
        cycles_since_improvement: 0,
        seed: config.seed,
    };
    for epoch in 1..=total {
        let phase = schedule.phase_of(epoch);
        state.epoch = epoch;
        state.phase = phase;
        let loss = trainer.epoch(&mut model, train_data, &targets, phase, epoch)?;
        log::info!("epoch {epoch} {phase} loss {:.6}", loss.total);
        log.push(LogLine {
            epoch,
            phase,
            loss,
            val_fine_acc: None,
        });
        if !projection_epochs.contains(&epoch) {
            continue;
        }
        let report = project_prototypes(&mut model, train_data, epoch)?;
        on_projection(&model, &report)?;
        projections.push(report);
        let epochs = if epoch == total {
            schedule.epochs_convex_final
        } else {
            schedule.epochs_convex
        };
        state.phase = Phase::Convex;
        let fixed = dataset_loss(&model, train_data, &config.weights)?;
        let per_epoch = convex_optimize_fc(&mut model, train_data, config, epochs)?;
        let eval = if val_data.is_empty() {
            train_data
        } else {
            val_data
        };
        let acc = fine_accuracy(&predict_images(&model, &eval.images())?, eval);
        if per_epoch.is_empty() {
            log.push(LogLine {
                epoch,
                phase: Phase::Convex,
                loss: fixed.clone(),
                val_fine_acc: Some(acc),
            });
        }
        for (e, parts) in per_epoch.iter().enumerate() {
            let per_parent: Vec<ParentLoss> = fixed
                .per_parent
                .iter()
                .zip(parts)
                .map(|(p, &(ce, reg))| ParentLoss {
                    parent: p.parent.clone(),
                    cross_entropy: ce,
                    clust: p.clust,
                    sep: p.sep,
                    reg,
                })
                .collect();
            let mut loss = LossBreakdown {
                per_parent,
                ceda: 0.0,
                total: 0.0,
            };
            loss.total = loss.weighted_total(&config.weights);
            if !loss.is_finite() {
                return Err(HpnetError::Training {
                    epoch,
                    phase: Phase::Convex.to_string(),
                    message: format!("non-finite loss: {loss:?}"),
                });
            }
            log.push(LogLine {
                epoch,
                phase: Phase::Convex,
                loss,
                val_fine_acc: (e + 1 == per_epoch.len()).then_some(acc),
            });
        }
        log::info!("epoch {epoch} projection + convex: validation fine accuracy {acc:.4}");
        if state.best_val_acc.is_none_or(|b| acc > b) {
            state.best_val_acc = Some(acc);
            state.best_epoch = Some(epoch);
            state.cycles_since_improvement = 0;
            best = Some(model.clone());
        } else {
            state.cycles_since_improvement += 1;
            if config
                .patience
                .is_some_and(|p| state.cycles_since_improvement >= p)
            {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.expect("the last epoch always projects"),
        last: model,
        log,
        projections,
        state,
    })
}
