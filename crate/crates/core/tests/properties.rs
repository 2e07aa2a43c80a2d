//! Randomized checks of the invariants each module promises.

use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hpnet::data::SyntheticSpec;
use hpnet::explain::{explain_prediction, heat_map};
use hpnet::inference::{argmax, coarse_of_joint, predict};
use hpnet::model::{BackboneConfig, HpnetModel, ModelConfig, Pnet, PrototypeLayer};
use hpnet::novelty::{balance, DetectorKind, DetectorParams, LogitFeature, NoveltyDetector};
use hpnet::numerics::{sigmoid, Tape, Tensor};
use hpnet::objective::{
    clustering_cost, hierarchical_cross_entropy, layer_targets, separation_cost,
};
use hpnet::taxonomy::{HierarchicalLabel, Taxonomy};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random taxonomy JSON with up to three levels below the root.
fn random_taxonomy(rng: &mut ChaCha8Rng) -> String {
    fn node(rng: &mut ChaCha8Rng, name: String, depth: usize) -> String {
        let leaf = depth > 0 && (depth == 3 || rng.gen_bool(0.35));
        if leaf {
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
    node(rng, "n".into(), 0)
}

fn tiny_model(tax: Taxonomy, seed: u64) -> HpnetModel {
    let config = ModelConfig {
        backbone: BackboneConfig::tiny(8),
        prototypes_per_class: 2,
        epsilon: 1e-4,
    };
    HpnetModel::new(config, tax, seed).unwrap()
}

fn labels_for(tax: &Taxonomy, n: usize, rng: &mut ChaCha8Rng) -> Vec<HierarchicalLabel> {
    let leaves = tax.leaves();
    (0..n)
        .map(|_| tax.label_for(leaves[rng.gen_range(0..leaves.len())]))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(3..7), rng.gen_range(3..7));
        let x = random_tensor(&mut rng, &[2, c, h, w]);
        let y = random_tensor(&mut rng, &[2, c, h, w]);
        let k = random_tensor(&mut rng, &[3, c, 3, 3]);
        let stride = rng.gen_range(1..3);
        let mut tape = Tape::new();
        let kv = tape.constant(k);
        let mut conv = |t: Tensor| {
            let v = tape.constant(t);
            let o = tape.conv2d(v, kv, stride, 1).unwrap();
            tape.value(o).clone()
        };
        let lhs = conv(Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]));
        let (cx, cy) = (conv(x), conv(y));
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn taxonomy_paths_and_layers(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tax = Taxonomy::parse(&random_taxonomy(&mut rng)).unwrap();
        let labels = tax.all_labels();
        prop_assert_eq!(labels.len(), tax.leaves().len());
        let mut leaves_seen = BTreeSet::new();
        for l in &labels {
            let nodes = tax.validate_label(l).unwrap();
            prop_assert!(tax.is_leaf(*nodes.last().unwrap()));
            prop_assert!(leaves_seen.insert(l.leaf().unwrap().to_string()));
        }
        let root_to_leaf: BTreeSet<Vec<String>> = tax.leaves().iter().map(|&l| tax.label_for(l).path).collect();
        let validated: BTreeSet<Vec<String>> = labels.into_iter().map(|l| l.path).collect();
        prop_assert_eq!(validated, root_to_leaf);
        let m = tiny_model(tax.clone(), seed);
        prop_assert_eq!(m.layers.len(), tax.parents().len());
    }

    #[test]
    fn similarity_is_permutation_equivariant_and_dominates_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = PrototypeLayer::new("p", 3, 2, 4, 1e-4, &mut rng);
        let z = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.gen());
        let base = layer.similarity_scores(&z).unwrap();
        let m = layer.num_prototypes();
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = layer.clone();
        for (new, &old) in perm.iter().enumerate() {
            shuffled.prototypes.data_mut()[new * 4..(new + 1) * 4].copy_from_slice(layer.prototype(old));
        }
        let s = shuffled.similarity_scores(&z).unwrap();
        for n in 0..2 {
            for (new, &old) in perm.iter().enumerate() {
                prop_assert_eq!(s.scores.at(&[n, new]), base.scores.at(&[n, old]));
            }
            for j in 0..m {
                let score = base.scores.at(&[n, j]);
                let (r, c) = base.argmax[n * m + j];
                prop_assert_eq!(base.maps.at(&[n, j, r, c]), score);
                for y in 0..3 {
                    for x in 0..3 {
                        prop_assert!(base.maps.at(&[n, j, y, x]) <= score);
                    }
                }
            }
        }
    }

    #[test]
    fn conditionals_are_distributions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = tiny_model(Taxonomy::parse(&random_taxonomy(&mut rng)).unwrap(), seed);
        let out = m.forward(&Tensor::from_fn(&[3, 3, 8, 8], |_| rng.gen())).unwrap();
        for l in &out.layers {
            for p in &l.probs {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_decouples_through_the_logarithm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tax = Taxonomy::parse(&random_taxonomy(&mut rng)).unwrap();
        let m = tiny_model(tax.clone(), seed);
        let images = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.gen());
        let labels = labels_for(&tax, 4, &mut rng);
        let ce = hierarchical_cross_entropy(&m, &images, &labels).unwrap();
        let preds = predict(&m, &images).unwrap();
        let flat: f64 = preds
            .iter()
            .zip(&labels)
            .map(|(p, l)| {
                let leaf = tax.find(l.leaf().unwrap()).unwrap();
                -p.joint[tax.leaf_index(leaf).unwrap()].ln()
            })
            .sum();
        prop_assert!((ce - flat).abs() < 1e-10, "{} vs {}", ce, flat);
    }

    #[test]
    fn marginalized_joint_is_the_root_conditional(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tax = Taxonomy::parse(&random_taxonomy(&mut rng)).unwrap();
        let m = tiny_model(tax.clone(), seed);
        for p in predict(&m, &Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen())).unwrap() {
            let coarse = coarse_of_joint(&tax, &p.joint);
            for (i, (_, v)) in coarse.iter().enumerate() {
                prop_assert!((v - p.conditionals[0][i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn off_path_images_do_not_touch_a_layer(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tax = Taxonomy::parse(&random_taxonomy(&mut rng)).unwrap();
        let m = tiny_model(tax.clone(), seed);
        let labels = labels_for(&tax, 5, &mut rng);
        let z = m.forward_latent(&Tensor::from_fn(&[5, 3, 8, 8], |_| rng.gen())).unwrap();
        let targets = layer_targets(&tax, &labels).unwrap();
        for (k, layer) in m.layers.iter().enumerate() {
            let keep: Vec<usize> = (0..5).filter(|&i| targets[k][i].is_some()).collect();
            let rows: Vec<Tensor> = keep.iter().map(|&i| z.slice_outer(i)).collect();
            let sub = Tensor::stack(&rows.iter().collect::<Vec<_>>());
            let sub_targets: Vec<Option<usize>> = keep.iter().map(|&i| targets[k][i]).collect();
            let full_c = clustering_cost(layer, &z, &targets[k]).unwrap();
            let full_s = separation_cost(layer, &z, &targets[k]).unwrap();
            prop_assert!(full_c >= 0.0 && full_s <= 0.0);
            match sub {
                Ok(sub) => {
                    prop_assert!((clustering_cost(layer, &sub, &sub_targets).unwrap() - full_c).abs() < 1e-12);
                    prop_assert!((separation_cost(layer, &sub, &sub_targets).unwrap() - full_s).abs() < 1e-12);
                }
                Err(_) => prop_assert!(full_c == 0.0 && full_s == 0.0),
            }
        }
    }

    #[test]
    fn flat_hierarchy_reduces_to_pnet(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kids: Vec<String> = (0..k).map(|i| format!(r#"{{"name":"c{i}"}}"#)).collect();
        let tax = Taxonomy::parse(&format!(r#"{{"name":"root","children":[{}]}}"#, kids.join(","))).unwrap();
        let mut m = tiny_model(tax, seed);
        for v in m.layers[0].fc.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let pnet = Pnet::from_hpnet(&m).unwrap();
        let batch = Tensor::from_fn(&[3, 3, 8, 8], |_| rng.gen());
        let out = m.forward(&batch).unwrap();
        let scores = pnet.scores(&batch).unwrap();
        prop_assert_eq!(scores.data(), out.layers[0].scores.data());
        let logits = pnet.logits(&batch).unwrap();
        for (a, b) in logits.data().iter().zip(out.layers[0].logits.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn contributions_add_up_to_the_logit(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = tiny_model(Taxonomy::parse(&random_taxonomy(&mut rng)).unwrap(), seed);
        let img = Tensor::from_fn(&[3, 8, 8], |_| rng.gen());
        let e = explain_prediction(&m, &img, "x", usize::MAX, None).unwrap();
        prop_assert!(!e.levels.is_empty());
        for l in &e.levels {
            let sum: f64 = l.contributions.iter().map(|c| c.contribution).sum();
            prop_assert!((sum - l.logit).abs() < 1e-8);
            prop_assert!((l.contributions.iter().map(|c| c.share).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn heat_maps_are_normalized_and_keep_the_peak(seed in any::<u64>(), h in 2usize..6, f in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = h + 1;
        let map: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let (h0, w0) = ((h - 1) * f + 1, (w - 1) * f + 1);
        let hm = heat_map(&map, h, w, h0, w0).unwrap();
        let lo = hm.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = hm.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!((lo, hi), (0.0, 1.0));
        let i = argmax(&map);
        prop_assert_eq!(hm.argmax(), ((i / w) * f, (i % w) * f));
    }

    #[test]
    fn balanced_sets_are_exactly_balanced(seed in any::<u64>(), nf in 0usize..30, nn in 0usize..30) {
        let feats: Vec<LogitFeature> = (0..nf + nn)
            .map(|i| LogitFeature { image_id: i.to_string(), values: vec![i as f64], novel: i >= nf })
            .collect();
        let b = balance(feats, &mut ChaCha8Rng::seed_from_u64(seed));
        let novel = b.iter().filter(|f| f.novel).count();
        prop_assert_eq!(novel, nf.min(nn));
        prop_assert_eq!(b.len() - novel, nf.min(nn));
    }

    #[test]
    fn logistic_probability_is_sigmoid_of_an_affine_score(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..6);
        let det = NoveltyDetector {
            kind: DetectorKind::LogisticReg,
            parent: "p".into(),
            params: DetectorParams::Linear {
                weights: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                bias: rng.gen_range(-1.0..1.0),
                mean: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                scale: (0..d).map(|_| rng.gen_range(0.5..2.0)).collect(),
                penalty: 0.0,
            },
        };
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s = det.score(&x).unwrap();
        let out = det.detect(&x).unwrap();
        prop_assert_eq!(out.p_novel, sigmoid(s));
        prop_assert_eq!(out.is_novel, s > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_splits_are_disjoint(seed in any::<u64>()) {
        let mut spec = SyntheticSpec::pinned();
        spec.image_size = 16;
        spec.train_per_class = 3;
        spec.val_per_class = 1;
        spec.test_per_class = 2;
        spec.novel_per_class = 2;
        spec.seed = seed;
        let tax = spec.taxonomy().unwrap();
        let sets = spec.generate().unwrap();
        let mut ids = HashSet::new();
        for d in [&sets.train, &sets.val, &sets.test, &sets.novel] {
            for item in &d.items {
                prop_assert!(ids.insert(item.id.clone()));
            }
        }
        let coarse: HashSet<&str> = tax.level(1).iter().map(|&n| tax.name(n)).collect();
        for item in &sets.novel.items {
            prop_assert!(tax.find(item.label.leaf().unwrap()).is_none());
            prop_assert!(coarse.contains(item.label.coarse().unwrap()));
        }
    }
}
