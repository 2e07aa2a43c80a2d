//! Command-line front end: train, eval, explain, neighbors, novelty, synth.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hpnet::data::{
    load_directory, load_novel_directory, read_image, resize_bilinear, write_png, Holdout,
    LabeledDataset, Manifest, Split, SyntheticSpec,
};
use hpnet::explain::{
    explain_prediction, parse_prototype_id, prototype_neighbors, write_explanation, write_neighbors,
};
use hpnet::inference::{accuracy_suite, clustering_quality, MetricsReport};
use hpnet::model::{
    checkpoint_digest, load_checkpoint, load_checkpoint_for, save_checkpoint, BackboneConfig,
    HpnetModel, ModelConfig,
};
use hpnet::novelty::{
    loco_evaluate, novel_child, DetectorKind, FeatureSet, LocoConfig, LocoReport, NoveltySidecar,
};
use hpnet::numerics::Tensor;
use hpnet::taxonomy::Taxonomy;
use hpnet::training::{format_log, train, ProjectionReport, TrainConfig};
use hpnet::HpnetError;

/// A problem with the invocation or its configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(
            HpnetError::Config(_)
            | HpnetError::TaxonomyParse { .. }
            | HpnetError::ConfigHash { .. },
        ) = cause.downcast_ref::<HpnetError>()
        {
            return 2;
        }
    }
    1
}

#[derive(Parser, Debug)]
#[command(name = "hpnet", version, about = "Hierarchical prototype networks")]
pub struct Cli {
    /// Log progress at info level.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write model.hpn, train.log, config.json and projection.json.
    Train(TrainArgs),
    /// Accuracy and clustering-quality metrics of a checkpoint.
    Eval(EvalArgs),
    /// Prototype evidence and heat maps for individual predictions.
    Explain(ExplainArgs),
    /// Nearest images of one prototype.
    Neighbors(NeighborsArgs),
    /// Leave-one-class-out novel class detection and detector export.
    Novelty(NoveltyArgs),
    /// Render a synthetic spec to an image directory with a manifest.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Synthetic dataset spec (JSON).
    #[arg(long, value_name = "FILE", conflicts_with_all = ["data", "pinned"])]
    pub synthetic: Option<PathBuf>,
    /// The built-in pinned synthetic spec.
    #[arg(long, conflicts_with = "data")]
    pub pinned: bool,
    /// Image directory with train/<leaf>/ and optional val/, test/ and novel/<parent>/<class>/.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Validation images per class taken from train/ when val/ is absent
    /// [default: 50 of every 1300].
    #[arg(long, value_name = "N")]
    pub holdout: Option<usize>,
}

impl DataArgs {
    fn given(&self) -> bool {
        self.synthetic.is_some() || self.pinned || self.data.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Desk,
    Tiny,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Start from a config.json written by an earlier run; other flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Taxonomy JSON. Optional with synthetic data, whose spec implies one.
    #[arg(long, value_name = "FILE")]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs_conv: Option<usize>,
    #[arg(long)]
    pub epochs_all: Option<usize>,
    #[arg(long)]
    pub epochs_convex: Option<usize>,
    #[arg(long)]
    pub epochs_convex_final: Option<usize>,
    #[arg(long)]
    pub projection_period: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lr_conv: Option<f64>,
    #[arg(long)]
    pub lr_all: Option<f64>,
    #[arg(long)]
    pub lr_convex: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub convex_steps: Option<usize>,
    /// Disable the noise-image confidence term.
    #[arg(long)]
    pub no_ceda: bool,
    /// Random resized crops on training images.
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub prototypes_per_class: Option<usize>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneKind>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Require the checkpoint to match this taxonomy.
    #[arg(long, value_name = "FILE")]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Write metrics.json and metrics.txt here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    Novel,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Image files to explain (resized to the model input).
    #[arg(long = "image", value_name = "FILE")]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Explain only the first N images of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
    /// projection.json from training, for source-patch references.
    #[arg(long, value_name = "FILE")]
    pub projection: Option<PathBuf>,
    /// novelty.json detectors; adds joint novel-child probabilities.
    #[arg(long, value_name = "FILE")]
    pub novelty: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct NeighborsArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Prototype id, `<parent>-p<index>`.
    #[arg(long)]
    pub prototype: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct NoveltyArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// pb_threshold, score_svm or logistic_reg; repeatable [default: all three].
    #[arg(long = "kind")]
    pub kinds: Vec<DetectorKind>,
    /// child_and_root or child_only.
    #[arg(long, default_value = "child_and_root", value_parser = parse_feature_set)]
    pub feature_set: FeatureSet,
    #[arg(long, default_value_t = 0.2)]
    pub holdout_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_name = "FILE", conflicts_with = "pinned")]
    pub synthetic: Option<PathBuf>,
    #[arg(long)]
    pub pinned: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

fn parse_feature_set(s: &str) -> std::result::Result<FeatureSet, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown feature set {s}"))
}

/// Everything a training run depends on, written to `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub taxonomy: Option<PathBuf>,
    pub data: DataSource,
    pub model: ModelConfig,
    pub backbone: BackboneKind,
    pub train: TrainConfig,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        path: Option<PathBuf>,
        spec: SyntheticSpec,
    },
    Directory {
        root: PathBuf,
        holdout: Holdout,
    },
}

pub struct Datasets {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: Option<LabeledDataset>,
    pub novel: Option<LabeledDataset>,
}

impl Datasets {
    fn split(&self, s: SplitArg) -> Result<&LabeledDataset> {
        let d = match s {
            SplitArg::Train => Some(&self.train),
            SplitArg::Val => Some(&self.val),
            SplitArg::Test => self.test.as_ref(),
            SplitArg::Novel => self.novel.as_ref(),
        };
        d.ok_or_else(|| usage(format!("the data source has no {s:?} split").to_lowercase()))
    }

    fn image_size(&self) -> Result<usize> {
        let item = self
            .train
            .items
            .first()
            .ok_or_else(|| usage("the training split is empty"))?;
        let s = item.image.shape();
        if s[1] != s[2] {
            bail!(usage(format!(
                "image {} is {}x{}; square images are required",
                item.id, s[1], s[2]
            )));
        }
        Ok(s[1])
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        bail!(usage(format!("file not found: {}", path.display())));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn read_taxonomy(path: &Path) -> Result<Taxonomy> {
    if !path.is_file() {
        bail!(usage(format!(
            "taxonomy file not found: {}",
            path.display()
        )));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Taxonomy::parse(&text).with_context(|| format!("parsing taxonomy {}", path.display()))
}

impl DataSource {
    fn from_args(a: &DataArgs) -> Result<Self> {
        if let Some(path) = &a.synthetic {
            let spec: SyntheticSpec = read_json(path)?;
            spec.validate()?;
            Ok(DataSource::Synthetic {
                path: Some(path.clone()),
                spec,
            })
        } else if a.pinned {
            Ok(DataSource::Synthetic {
                path: None,
                spec: SyntheticSpec::pinned(),
            })
        } else if let Some(root) = &a.data {
            Ok(DataSource::Directory {
                root: root.clone(),
                holdout: a.holdout.map(Holdout::Count).unwrap_or_default(),
            })
        } else {
            bail!(usage("one of --synthetic, --pinned or --data is required"))
        }
    }

    fn taxonomy(&self, file: Option<&Path>) -> Result<Taxonomy> {
        match (file, self) {
            (Some(p), _) => read_taxonomy(p),
            (None, DataSource::Synthetic { spec, .. }) => Ok(spec.taxonomy()?),
            (None, DataSource::Directory { .. }) => {
                bail!(usage("--taxonomy is required with --data"))
            }
        }
    }

    fn load(&self, tax: &Taxonomy) -> Result<Datasets> {
        let sets = match self {
            DataSource::Synthetic { spec, .. } => {
                let s = spec.generate()?;
                Datasets {
                    train: s.train,
                    val: s.val,
                    test: Some(s.test),
                    novel: (!s.novel.is_empty()).then_some(s.novel),
                }
            }
            DataSource::Directory { root, holdout } => {
                let train_dir = root.join("train");
                if !train_dir.is_dir() {
                    bail!(usage(format!("{} has no train/ directory", root.display())));
                }
                let val_dir = root.join("val");
                let (train, val) = if val_dir.is_dir() {
                    let (train, _) = load_directory(&train_dir, tax, Holdout::Count(0))?;
                    let (val, _) = load_directory(&val_dir, tax, Holdout::Count(0))?;
                    (train, retag(val, Split::Val))
                } else {
                    load_directory(&train_dir, tax, *holdout)?
                };
                let test_dir = root.join("test");
                let test = if test_dir.is_dir() {
                    Some(retag(
                        load_directory(&test_dir, tax, Holdout::Count(0))?.0,
                        Split::Test,
                    ))
                } else {
                    None
                };
                let novel_dir = root.join("novel");
                let novel = if novel_dir.is_dir() {
                    Some(load_novel_directory(&novel_dir, tax)?)
                } else {
                    None
                };
                Datasets {
                    train: prefix_ids(train),
                    val: prefix_ids(val),
                    test: test.map(prefix_ids),
                    novel: novel.map(prefix_ids),
                }
            }
        };
        for d in [
            Some(&sets.train),
            Some(&sets.val),
            sets.test.as_ref(),
            sets.novel.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            d.validate(tax)?;
        }
        Ok(sets)
    }
}

fn retag(mut d: LabeledDataset, split: Split) -> LabeledDataset {
    d.split = split;
    d
}

fn prefix_ids(mut d: LabeledDataset) -> LabeledDataset {
    let s = d.split.as_str();
    for item in &mut d.items {
        item.id = format!("{s}/{}", item.id);
    }
    d
}

fn backbone_for(kind: BackboneKind, input_size: usize) -> BackboneConfig {
    match kind {
        BackboneKind::Desk => BackboneConfig {
            input_size,
            ..BackboneConfig::desk()
        },
        BackboneKind::Tiny => BackboneConfig::tiny(input_size),
    }
}

fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let base: Option<RunConfig> = a.config.as_deref().map(read_json).transpose()?;
    let data = if a.data.given() {
        DataSource::from_args(&a.data)?
    } else if let Some(b) = &base {
        b.data.clone()
    } else {
        bail!(usage("one of --synthetic, --pinned or --data is required"));
    };
    let (mut model, mut tc, mut backbone, base_seed, base_tax) = match base {
        Some(b) => (b.model, b.train, b.backbone, b.seed, b.taxonomy),
        None => (
            ModelConfig::default(),
            TrainConfig::default(),
            BackboneKind::Desk,
            0,
            None,
        ),
    };
    let seed = a.seed.unwrap_or(base_seed);
    let s = &mut tc.schedule;
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut s.epochs_conv, a.epochs_conv);
    set(&mut s.epochs_all, a.epochs_all);
    set(&mut s.epochs_convex, a.epochs_convex);
    set(&mut s.epochs_convex_final, a.epochs_convex_final);
    set(&mut s.projection_period, a.projection_period);
    set(&mut tc.batch_size, a.batch_size);
    set(&mut tc.convex_steps, a.convex_steps);
    set(&mut model.prototypes_per_class, a.prototypes_per_class);
    for (dst, v) in [
        (&mut tc.weights.lambda1, a.lambda1),
        (&mut tc.weights.lambda2, a.lambda2),
        (&mut tc.weights.lambda3, a.lambda3),
        (&mut tc.lr_conv, a.lr_conv),
        (&mut tc.lr_all, a.lr_all),
        (&mut tc.lr_convex, a.lr_convex),
        (&mut tc.momentum, a.momentum),
    ] {
        if let Some(v) = v {
            *dst = v;
        }
    }
    if a.no_ceda {
        tc.ceda = false;
    }
    if a.augment {
        tc.augment = true;
    }
    if a.patience.is_some() {
        tc.patience = a.patience;
    }
    if let Some(b) = a.backbone {
        backbone = b;
    }
    tc.seed = seed;
    model.backbone = backbone_for(backbone, model.backbone.input_size);
    Ok(RunConfig {
        taxonomy: a.taxonomy.clone().or(base_tax),
        data,
        model,
        backbone,
        train: tc,
        seed,
        out: a.out.clone(),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::Neighbors(a) => cmd_neighbors(&a),
        Command::Novelty(a) => cmd_novelty(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut rc = resolve_run_config(a)?;
    let tax = rc.data.taxonomy(rc.taxonomy.as_deref())?;
    let sets = rc.data.load(&tax)?;
    rc.model.backbone = backbone_for(rc.backbone, sets.image_size()?);
    rc.model.validate()?;
    rc.train.validate()?;

    create_dir(&rc.out)?;
    write_json(&rc.out.join("config.json"), &rc)?;
    let all: Vec<&LabeledDataset> = [
        Some(&sets.train),
        Some(&sets.val),
        sets.test.as_ref(),
        sets.novel.as_ref(),
    ]
    .into_iter()
    .flatten()
    .collect();
    write_json(
        &rc.out.join("manifest.json"),
        &Manifest::build(rc.seed, &all),
    )?;

    let model = HpnetModel::new(rc.model.clone(), tax, rc.seed)?;
    log::info!(
        "training on {} images ({} validation), {} epochs",
        sets.train.len(),
        sets.val.len(),
        rc.train.schedule.total_epochs()
    );
    let outcome = train(model, &sets.train, &sets.val, &rc.train)?;
    save_checkpoint(&outcome.best, rc.out.join("model.hpn"))?;
    write_text(&rc.out.join("train.log"), &format_log(&outcome.log))?;
    let projection = outcome.best_projection().or(outcome.projections.last());
    write_json(&rc.out.join("projection.json"), &projection)?;
    println!(
        "best epoch {} validation fine accuracy {}",
        outcome
            .state
            .best_epoch
            .map_or("-".into(), |e| e.to_string()),
        outcome
            .state
            .best_val_acc
            .map_or("-".into(), |a| format!("{a:.4}"))
    );
    println!("wrote {}", rc.out.join("model.hpn").display());
    Ok(())
}

fn load_model(path: &Path, taxonomy: Option<&Path>) -> Result<HpnetModel> {
    if !path.is_file() {
        bail!(usage(format!("checkpoint not found: {}", path.display())));
    }
    let model = match taxonomy {
        Some(t) => load_checkpoint_for(path, &read_taxonomy(t)?)?,
        None => load_checkpoint(path)?,
    };
    Ok(model)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint, a.taxonomy.as_deref())?;
    let sets = DataSource::from_args(&a.data)?.load(model.taxonomy())?;
    let test = sets
        .test
        .as_ref()
        .ok_or_else(|| usage("evaluation needs a test split"))?;
    let accuracy = accuracy_suite(&model, test, sets.novel.as_ref())?;
    let mut clustering = std::collections::BTreeMap::new();
    clustering.insert(
        "train".to_string(),
        clustering_quality(&model, &sets.train)?,
    );
    clustering.insert("test".to_string(), clustering_quality(&model, test)?);
    let report = MetricsReport {
        accuracy,
        clustering,
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &report)?;
        write_text(&out.join("metrics.txt"), &text)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct NoveltyFlag {
    parent: String,
    kind: DetectorKind,
    p_novel: f64,
    joint: f64,
    is_novel: bool,
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let model = load_model(&a.checkpoint, None)?;
    let size = model.config().backbone.input_size;
    let mut images: Vec<(String, Tensor)> = Vec::new();
    for path in &a.images {
        if !path.is_file() {
            bail!(usage(format!("image not found: {}", path.display())));
        }
        let mut img = read_image(path)?;
        if img.shape()[1..] != [size, size] {
            img = resize_bilinear(&img, size, size);
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        images.push((id, img));
    }
    if a.data.given() {
        let sets = DataSource::from_args(&a.data)?.load(model.taxonomy())?;
        let d = sets.split(a.split)?;
        let n = a.limit.unwrap_or(d.len()).min(d.len());
        images.extend(d.items[..n].iter().map(|i| (i.id.clone(), i.image.clone())));
    }
    if images.is_empty() {
        bail!(usage("nothing to explain: pass --image or a data source"));
    }
    let projection: Option<ProjectionReport> = match &a.projection {
        Some(p) => read_json::<Option<ProjectionReport>>(p)?,
        None => None,
    };
    let sidecar = match &a.novelty {
        Some(p) => Some(NoveltySidecar::load(p, &checkpoint_digest(&a.checkpoint)?)?),
        None => None,
    };
    let root = a.out.join("explain");
    create_dir(&root)?;
    for (id, img) in &images {
        let e = explain_prediction(&model, img, id, a.top_k, projection.as_ref())?;
        let dir = write_explanation(&e, img, &root)?;
        let shares: Vec<String> = e
            .levels
            .iter()
            .map(|l| format!("{}={:.0}%", l.predicted, 100.0 * l.listed_share))
            .collect();
        let mut line = format!("{id}: {} [{}]", e.path.join("/"), shares.join(" "));
        if let Some(s) = &sidecar {
            let mut flags = Vec::new();
            for det in &s.detectors {
                let nc = novel_child(&model, det, img, s.feature_set)?;
                let tax = model.taxonomy();
                let on_path = det.parent == tax.name(tax.root()) || e.path.contains(&det.parent);
                let is_novel = on_path && nc.detection.is_novel;
                if is_novel {
                    line.push_str(&format!(
                        " novel {} ({}, joint {:.2})",
                        det.parent, det.kind, nc.joint
                    ));
                }
                flags.push(NoveltyFlag {
                    parent: det.parent.clone(),
                    kind: det.kind,
                    p_novel: nc.detection.p_novel,
                    joint: nc.joint,
                    is_novel,
                });
            }
            write_json(&dir.join("novelty.json"), &flags)?;
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_neighbors(a: &NeighborsArgs) -> Result<()> {
    let model = load_model(&a.checkpoint, None)?;
    let (parent, j) = parse_prototype_id(&a.prototype).map_err(|e| usage(e.to_string()))?;
    let sets = DataSource::from_args(&a.data)?.load(model.taxonomy())?;
    let d = sets.split(a.split)?;
    let report = prototype_neighbors(&model, d, &parent, j, a.k)?;
    let root = a.out.join("neighbors");
    create_dir(&root)?;
    let dir = write_neighbors(&report, d, &root)?;
    for n in &report.neighbors {
        println!(
            "{} {} ({}, {}) {:.6}",
            n.rank, n.image_id, n.row, n.col, n.distance
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn loco_table(reports: &[LocoReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{} overall {}\n",
            r.kind,
            r.overall.map_or("-".into(), |v| format!("{v:.4}"))
        ));
        for p in &r.parents {
            s.push_str(&format!(
                "  {} {:.4} over {} folds\n",
                p.parent,
                p.accuracy,
                p.folds.len()
            ));
            for f in &p.folds {
                s.push_str(&format!(
                    "    test {} accuracy {:.4} ({} familiar + {} novel)\n",
                    f.test_class, f.accuracy, f.test_familiar, f.test_novel
                ));
            }
        }
        for p in &r.skipped {
            s.push_str(&format!("  {p} skipped: fewer than two novel classes\n"));
        }
    }
    s
}

fn cmd_novelty(a: &NoveltyArgs) -> Result<()> {
    let model = load_model(&a.checkpoint, None)?;
    let sets = DataSource::from_args(&a.data)?.load(model.taxonomy())?;
    let test = sets
        .test
        .as_ref()
        .ok_or_else(|| usage("novelty evaluation needs a test split"))?;
    let novel = sets
        .novel
        .as_ref()
        .ok_or_else(|| usage("novelty evaluation needs a novel split"))?;
    let kinds = if a.kinds.is_empty() {
        DetectorKind::ALL.to_vec()
    } else {
        a.kinds.clone()
    };
    let config = LocoConfig {
        feature_set: a.feature_set,
        holdout_fraction: a.holdout_fraction,
        seed: a.seed,
    };
    let reports = kinds
        .iter()
        .map(|&k| loco_evaluate(&model, k, &sets.train, test, novel, &config))
        .collect::<hpnet::Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    write_json(&a.out.join("loco.json"), &reports)?;
    let table = loco_table(&reports);
    write_text(&a.out.join("loco.txt"), &table)?;
    print!("{table}");
    let sidecar = NoveltySidecar {
        checkpoint_sha256: checkpoint_digest(&a.checkpoint)?,
        feature_set: a.feature_set,
        detectors: reports.iter().flat_map(|r| r.detectors.clone()).collect(),
    };
    sidecar.save(&a.out.join("novelty.json"))?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = match &a.synthetic {
        Some(p) => read_json::<SyntheticSpec>(p)?,
        None if a.pinned => SyntheticSpec::pinned(),
        None => bail!(usage("one of --synthetic or --pinned is required")),
    };
    spec.validate()?;
    let sets = spec.generate()?;
    create_dir(&a.out)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    write_text(&a.out.join("taxonomy.json"), &spec.taxonomy_json())?;
    for d in [&sets.train, &sets.val, &sets.test, &sets.novel] {
        for item in &d.items {
            let name = item.id.rsplit('/').next().unwrap_or(&item.id);
            let mut dir = a.out.join(d.split.as_str());
            if d.split == Split::Novel {
                for part in &item.label.path {
                    dir.push(part);
                }
            } else {
                dir.push(item.label.leaf().unwrap_or_default());
            }
            create_dir(&dir)?;
            write_png(&item.image, &dir.join(format!("{name}.png")))?;
        }
    }
    write_json(
        &a.out.join("manifest.json"),
        &Manifest::build(
            spec.seed,
            &[&sets.train, &sets.val, &sets.test, &sets.novel],
        ),
    )?;
    println!("wrote {}", a.out.display());
    Ok(())
}
