//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hpnet::data::{SyntheticSets, SyntheticSpec};
use hpnet::explain::explain_prediction;
use hpnet::inference::{
    accuracy_suite, clustering_quality, clustering_quality_from_latents, predict, AccuracySuite,
};
use hpnet::model::{BackboneConfig, HpnetModel, ModelConfig, Pnet};
use hpnet::novelty::{
    fit_detector, loco_evaluate, DetectorKind, LocoConfig, LocoReport, LogitFeature,
};
use hpnet::numerics::{grad_check, Tensor};
use hpnet::objective::{hierarchical_cross_entropy, layer_targets, objective_on, LossWeights};
use hpnet::taxonomy::{HierarchicalLabel, Taxonomy};
use hpnet::training::{train_with, TrainConfig, TrainOutcome};

const SEED: u64 = 7;

struct ProjectionCheck {
    epoch: usize,
    prototypes: usize,
    max_gap: f64,
    wrong_class: usize,
}

struct Pinned {
    sets: SyntheticSets,
    outcome: TrainOutcome,
    checks: Vec<ProjectionCheck>,
    elapsed: Duration,
}

fn pinned() -> &'static Pinned {
    static RUN: OnceLock<Pinned> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let spec = SyntheticSpec::pinned();
        let sets = spec.generate().unwrap();
        let config = ModelConfig {
            backbone: BackboneConfig {
                input_size: spec.image_size,
                ..BackboneConfig::desk()
            },
            ..ModelConfig::default()
        };
        let model = HpnetModel::new(config, spec.taxonomy().unwrap(), SEED).unwrap();
        let tc = TrainConfig {
            seed: SEED,
            ..TrainConfig::default()
        };
        let mut checks = Vec::new();
        let outcome = train_with(model, &sets.train, &sets.val, &tc, |m, report| {
            let tax = m.taxonomy();
            let mut latents: BTreeMap<usize, Tensor> = BTreeMap::new();
            let mut check = ProjectionCheck {
                epoch: report.epoch,
                prototypes: report.records.len(),
                max_gap: 0.0,
                wrong_class: 0,
            };
            for r in &report.records {
                let (k, layer) = m.layer_by_name(&r.parent).unwrap();
                let item = &sets.train.items[r.image_index];
                let z = latents.entry(r.image_index).or_insert_with(|| {
                    m.forward_latent(&Tensor::stack(&[&item.image]).unwrap())
                        .unwrap()
                        .slice_outer(0)
                });
                let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
                let p = layer.prototype(r.prototype);
                for (q, pq) in p.iter().enumerate().take(d) {
                    let gap = (z.data()[q * h * w + r.row * w + r.col] - pq).abs();
                    check.max_gap = check.max_gap.max(gap);
                }
                let parent = tax.parents()[k];
                let allocated = tax.name(tax.children(parent)[layer.allocation[r.prototype]]);
                if r.class != allocated
                    || item.id != r.image_id
                    || !item.label.path.iter().any(|n| n == allocated)
                {
                    check.wrong_class += 1;
                }
            }
            checks.push(check);
            Ok(())
        })
        .unwrap();
        Pinned {
            sets,
            outcome,
            checks,
            elapsed: start.elapsed(),
        }
    })
}

fn pinned_accuracy() -> &'static AccuracySuite {
    static ACC: OnceLock<AccuracySuite> = OnceLock::new();
    ACC.get_or_init(|| {
        let p = pinned();
        accuracy_suite(&p.outcome.best, &p.sets.test, Some(&p.sets.novel)).unwrap()
    })
}

const TWO_PARENT: &str = r#"{"name":"root","children":[
    {"name":"vehicle","children":[{"name":"ambulance"},{"name":"pickup"}]},
    {"name":"animal","children":[{"name":"cat"},{"name":"dog"}]}]}"#;

fn tiny_model(tax: Taxonomy, input: usize, seed: u64) -> HpnetModel {
    let config = ModelConfig {
        backbone: BackboneConfig::tiny(input),
        prototypes_per_class: 2,
        epsilon: 1e-4,
    };
    HpnetModel::new(config, tax, seed).unwrap()
}

fn random_taxonomy(rng: &mut ChaCha8Rng) -> Taxonomy {
    fn node(rng: &mut ChaCha8Rng, name: String, depth: usize) -> String {
        if depth > 0 && (depth == 3 || rng.gen_bool(0.35)) {
            return format!(r#"{{"name":"{name}"}}"#);
        }
        let k = if depth == 0 {
            rng.gen_range(2..=3)
        } else {
            rng.gen_range(1..=3)
        };
        let kids: Vec<String> = (0..k)
            .map(|i| node(rng, format!("{name}_{i}"), depth + 1))
            .collect();
        format!(r#"{{"name":"{name}","children":[{}]}}"#, kids.join(","))
    }
    Taxonomy::parse(&node(rng, "n".into(), 0)).unwrap()
}

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let m = tiny_model(Taxonomy::parse(TWO_PARENT).unwrap(), 8, 11);
    let params: Vec<Tensor> = m
        .parameters()
        .iter()
        .map(|(_, _, t)| (*t).clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen());
    let noise = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen());
    let labels = [
        HierarchicalLabel::new(["vehicle", "pickup"]),
        HierarchicalLabel::new(["animal", "cat"]),
    ];
    let targets = layer_targets(m.taxonomy(), &labels).unwrap();
    let w = LossWeights::default();
    let err = grad_check(&params, 1e-6, |tape, vars| {
        let mv = m.vars_from(vars)?;
        let xi = tape.constant(x.clone());
        let nz = tape.constant(noise.clone());
        Ok(objective_on(tape, &m, &mv, xi, &targets, Some(nz), &w)?.total)
    })
    .map_err(|e| e.to_string())?;
    let t = start.elapsed();
    ensure(
        err < 1e-4 && t < Duration::from_secs(10),
        format!("max relative error {err:.2e} in {:.2} s", t.as_secs_f64()),
    )
}

fn decoupling_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let tax = random_taxonomy(&mut rng);
        let m = tiny_model(tax.clone(), 8, case);
        let n = rng.gen_range(1..5);
        let images = Tensor::from_fn(&[n, 3, 8, 8], |_| rng.gen());
        let leaves = tax.leaves();
        let labels: Vec<HierarchicalLabel> = (0..n)
            .map(|_| tax.label_for(leaves[rng.gen_range(0..leaves.len())]))
            .collect();
        let ce = hierarchical_cross_entropy(&m, &images, &labels).map_err(|e| e.to_string())?;
        let joint: f64 = predict(&m, &images)
            .map_err(|e| e.to_string())?
            .iter()
            .zip(&labels)
            .map(|(p, l)| {
                -p.joint[tax
                    .leaf_index(tax.find(l.leaf().unwrap()).unwrap())
                    .unwrap()]
                .ln()
            })
            .sum();
        worst = worst.max((ce - joint).abs());
    }
    ensure(
        worst < 1e-10,
        format!("100 cases, max |difference| {worst:.2e}"),
    )
}

fn projection_invariant() -> Outcome {
    let p = pinned();
    let phases = p.checks.len();
    let expected = p.outcome.state.epoch;
    let gap = p.checks.iter().map(|c| c.max_gap).fold(0.0, f64::max);
    let wrong: usize = p.checks.iter().map(|c| c.wrong_class).sum();
    let total: usize = p.checks.iter().map(|c| c.prototypes).sum();
    let last = p.checks.last().map_or(0, |c| c.epoch);
    ensure(
        phases > 0 && last == expected && gap <= 1e-12 && wrong == 0,
        format!("{phases} projections, {total} prototypes, max gap {gap:.1e}, {wrong} from another class"),
    )
}

fn flat_reduction() -> Outcome {
    let mut worst_logit: f64 = 0.0;
    let mut score_mismatch = 0;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let k = rng.gen_range(2..6);
        let kids: Vec<String> = (0..k).map(|i| format!(r#"{{"name":"c{i}"}}"#)).collect();
        let tax = Taxonomy::parse(&format!(
            r#"{{"name":"root","children":[{}]}}"#,
            kids.join(",")
        ))
        .unwrap();
        let mut m = tiny_model(tax, 13, case);
        for v in m.layers[0].fc.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let pnet = Pnet::from_hpnet(&m).map_err(|e| e.to_string())?;
        let batch = Tensor::from_fn(&[3, 3, 13, 13], |_| rng.gen());
        let out = m.forward(&batch).map_err(|e| e.to_string())?;
        if pnet.scores(&batch).unwrap().data() != out.layers[0].scores.data() {
            score_mismatch += 1;
        }
        let logits = pnet.logits(&batch).unwrap();
        for (a, b) in logits.data().iter().zip(out.layers[0].logits.data()) {
            worst_logit = worst_logit.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    ensure(
        score_mismatch == 0 && worst_logit <= 1e-12,
        format!("20 models: scores bitwise equal in all, max relative logit gap {worst_logit:.1e}"),
    )
}

fn pinned_training() -> Outcome {
    let p = pinned();
    let a = pinned_accuracy();
    ensure(
        a.f_id >= 0.90
            && a.c_id >= 0.95
            && a.c_id >= a.f_id
            && p.elapsed < Duration::from_secs(30 * 60),
        format!(
            "F-ID {:.3}, C-ID {:.3}, training {:.0} s",
            a.f_id,
            a.c_id,
            p.elapsed.as_secs_f64()
        ),
    )
}

fn novel_coarse() -> Outcome {
    let p = pinned();
    let chance = 1.0 / p.outcome.best.taxonomy().level(1).len() as f64;
    let c = pinned_accuracy().c_novel.ok_or("no novel split")?;
    ensure(
        c >= chance + 0.25,
        format!("C-Novel {c:.3} vs chance {chance:.3}"),
    )
}

fn separable_fixture() -> Vec<LogitFeature> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..40)
        .map(|i| {
            let novel = i % 2 == 1;
            let lead = if novel {
                rng.gen_range(-0.2..0.2)
            } else {
                rng.gen_range(3.0..4.0)
            };
            LogitFeature {
                image_id: format!("f{i}"),
                values: vec![
                    lead,
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-1.0..1.0),
                ],
                novel,
            }
        })
        .collect()
}

fn novelty_detection() -> Outcome {
    let p = pinned();
    let report: LocoReport = loco_evaluate(
        &p.outcome.best,
        DetectorKind::LogisticReg,
        &p.sets.train,
        &p.sets.test,
        &p.sets.novel,
        &LocoConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let overall = report.overall.ok_or("no parent evaluated")?;
    let folds_ok = !report.parents.is_empty() && report.parents.iter().all(|r| r.folds.len() >= 2);
    let balanced = report
        .parents
        .iter()
        .flat_map(|r| &r.folds)
        .all(|f| f.test_familiar == f.test_novel && f.test_novel > 0);
    let fixture = separable_fixture();
    let mut fixture_acc = Vec::new();
    for kind in DetectorKind::ALL {
        let d = fit_detector(kind, "p", 3, &fixture, &[]).map_err(|e| e.to_string())?;
        fixture_acc.push(d.accuracy(&fixture).map_err(|e| e.to_string())?);
    }
    let min_folds = report
        .parents
        .iter()
        .map(|r| r.folds.len())
        .min()
        .unwrap_or(0);
    ensure(
        overall >= 0.65 && folds_ok && balanced && fixture_acc.iter().all(|&a| a == 1.0),
        format!(
            "logistic LOCO {overall:.3} over {} parents (min {min_folds} folds, balanced {balanced}); fixture {fixture_acc:?}",
            report.parents.len()
        ),
    )
}

/// Exhaustive oracle: every image's every patch, then the five nearest images.
fn oracle_quality(
    model: &HpnetModel,
    latents: &[Tensor],
    paths: &[Vec<String>],
) -> (BTreeMap<String, f64>, f64) {
    let tax = model.taxonomy();
    let mut per_layer = BTreeMap::new();
    let mut all = Vec::new();
    for (k, layer) in model.layers.iter().enumerate() {
        let parent = tax.parents()[k];
        let mut scores = Vec::new();
        for j in 0..layer.num_prototypes() {
            let p = layer.prototype(j);
            let mut per_image: Vec<(f64, usize)> = latents
                .iter()
                .enumerate()
                .map(|(i, z)| {
                    let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
                    let mut best = f64::INFINITY;
                    for r in 0..h {
                        for c in 0..w {
                            let dist: f64 = (0..d).map(|q| (z.at(&[q, r, c]) - p[q]).powi(2)).sum();
                            best = best.min(dist);
                        }
                    }
                    (best, i)
                })
                .collect();
            per_image.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let child = tax.name(tax.children(parent)[layer.allocation[j]]);
            let top = &per_image[..5.min(per_image.len())];
            let hits = top
                .iter()
                .filter(|(_, i)| paths[*i].iter().any(|n| n == child))
                .count();
            scores.push(100.0 * hits as f64 / top.len() as f64);
        }
        per_layer.insert(
            layer.parent.clone(),
            scores.iter().sum::<f64>() / scores.len() as f64,
        );
        all.extend(scores);
    }
    let overall = all.iter().sum::<f64>() / all.len() as f64;
    (per_layer, overall)
}

fn clustering_metric() -> Outcome {
    let m = tiny_model(Taxonomy::parse(TWO_PARENT).unwrap(), 8, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let d = m.layers[0].dim();
    let latents: Vec<Tensor> = (0..10)
        .map(|_| Tensor::from_fn(&[d, 4, 4], |_| rng.gen()))
        .collect();
    let leaves = m.taxonomy().leaves().to_vec();
    let paths: Vec<Vec<String>> = (0..10)
        .map(|i| m.taxonomy().label_for(leaves[i % leaves.len()]).path)
        .collect();
    let got = clustering_quality_from_latents(&m, &latents, &paths);
    let (per_layer, overall) = oracle_quality(&m, &latents, &paths);
    let fixture_ok = got.per_layer == per_layer && got.overall == overall;

    let p = pinned();
    let train = clustering_quality(&p.outcome.best, &p.sets.train).map_err(|e| e.to_string())?;
    let test = clustering_quality(&p.outcome.best, &p.sets.test).map_err(|e| e.to_string())?;
    ensure(
        fixture_ok && train.overall >= test.overall - 5.0,
        format!(
            "fixture matches oracle: {fixture_ok}; pinned train {:.1} vs test {:.1}",
            train.overall, test.overall
        ),
    )
}

fn explanation_identity() -> Outcome {
    let p = pinned();
    let m = &p.outcome.best;
    let mut worst: f64 = 0.0;
    let mut peaks = 0;
    let mut misplaced = 0;
    let (gh, gw) = m.config().backbone.latent_grid();
    for item in &p.sets.test.items {
        let e = explain_prediction(m, &item.image, &item.id, usize::MAX, None)
            .map_err(|e| e.to_string())?;
        for level in &e.levels {
            let sum: f64 = level.contributions.iter().map(|c| c.contribution).sum();
            worst = worst.max((sum - level.logit).abs());
            for c in &level.contributions {
                let heat = c.heat_map.as_ref().ok_or("missing heat map")?;
                let (h, w) = (heat.height, heat.width);
                let expected = (
                    c.row * (h - 1) / (gh - 1).max(1),
                    c.col * (w - 1) / (gw - 1).max(1),
                );
                peaks += 1;
                if heat.argmax() != expected {
                    misplaced += 1;
                }
            }
        }
    }
    ensure(
        worst < 1e-8 && misplaced == 0,
        format!(
            "{} images: max |Σ contributions − logit| {worst:.1e}, {misplaced}/{peaks} heat-map peaks off the argmax patch",
            p.sets.test.len()
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hpnet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "hpnet {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut spec = SyntheticSpec::pinned();
    spec.train_per_class = 12;
    spec.val_per_class = 4;
    spec.test_per_class = 4;
    spec.novel_per_class = 4;
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).map_err(|e| e.to_string())?;
    let spec_arg = spec_path.to_str().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = out.to_str().unwrap();
        run_cli(&[
            "train",
            "--synthetic",
            spec_arg,
            "--seed",
            "7",
            "--out",
            o,
            "--epochs-conv",
            "1",
            "--epochs-all",
            "2",
            "--projection-period",
            "1",
            "--epochs-convex",
            "1",
            "--epochs-convex-final",
            "2",
        ])?;
        let ckpt = out.join("model.hpn");
        run_cli(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--synthetic",
            spec_arg,
            "--out",
            o,
        ])?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
        runs.push((read(&ckpt)?, read(&out.join("metrics.json"))?));
    }
    ensure(
        runs[0].0 == runs[1].0 && runs[0].1 == runs[1].1,
        format!(
            "checkpoints {} bytes, identical {}; metrics identical {}",
            runs[0].0.len(),
            runs[0].0 == runs[1].0,
            runs[0].1 == runs[1].1
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("decoupling identity", decoupling_identity),
        ("projection invariant", projection_invariant),
        ("flat reduction", flat_reduction),
        ("pinned synthetic training", pinned_training),
        ("novel coarse generalization", novel_coarse),
        ("novelty detection", novelty_detection),
        ("clustering-quality metric", clustering_metric),
        ("explanation identity", explanation_identity),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS {:>2} {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} [{secs:.1} s]", i + 1)
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
