//! Hierarchical shapes: the coarse class fixes the shape family, the fine
//! class fixes the fill style. A recipe either pins the color or has it drawn
//! per image from saturated hues shared by every class.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LabeledDataset, LabeledItem, Split};
use crate::error::{HpnetError, Result};
use crate::numerics::Tensor;
use crate::taxonomy::{HierarchicalLabel, Taxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Cross,
    Triangle,
    Ring,
}

impl Shape {
    /// Whether offset (dx, dy) from the center lies inside a shape of radius r.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseRecipe {
    pub name: String,
    pub shape: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Solid,
    /// A band along the silhouette border.
    Outline,
    /// Border band plus diagonal stripes inside.
    Striped,
    /// Border band plus a checkerboard inside.
    Checkered,
}

impl Fill {
    pub fn as_str(self) -> &'static str {
        match self {
            Fill::Solid => "solid",
            Fill::Outline => "outline",
            Fill::Striped => "striped",
            Fill::Checkered => "checkered",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineRecipe {
    pub name: String,
    pub coarse: String,
    pub fill: Fill,
    /// Fixed RGB in [0, 1]; drawn per image when absent.
    #[serde(default)]
    pub color: Option<[f64; 3]>,
}

/// HSV in [0, 1]³ to RGB.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub coarse: Vec<CoarseRecipe>,
    pub fine: Vec<FineRecipe>,
    /// Fine classes held out of training, under known coarse classes.
    #[serde(default)]
    pub novel: Vec<FineRecipe>,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    #[serde(default)]
    pub novel_per_class: usize,
    /// Amplitude of per-pixel background noise.
    pub clutter: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSets {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub novel: LabeledDataset,
}

const PINNED_COLOR: [f64; 3] = [0.9, 0.2, 0.2];

impl SyntheticSpec {
    /// Three shape families × {solid, outline}, all in one color; striped and
    /// checkered are the novel fills.
    pub fn pinned() -> Self {
        let coarse = [
            ("square", Shape::Square),
            ("disc", Shape::Disc),
            ("cross", Shape::Cross),
        ];
        let fine_of = |fills: &[Fill]| {
            coarse
                .iter()
                .flat_map(|(c, _)| {
                    fills.iter().map(move |f| FineRecipe {
                        name: format!("{}_{c}", f.as_str()),
                        coarse: c.to_string(),
                        fill: *f,
                        color: Some(PINNED_COLOR),
                    })
                })
                .collect::<Vec<_>>()
        };
        SyntheticSpec {
            coarse: coarse
                .iter()
                .map(|(n, s)| CoarseRecipe {
                    name: n.to_string(),
                    shape: *s,
                })
                .collect(),
            fine: fine_of(&[Fill::Solid, Fill::Outline]),
            novel: fine_of(&[Fill::Striped, Fill::Checkered]),
            image_size: 64,
            train_per_class: 100,
            val_per_class: 20,
            test_per_class: 30,
            novel_per_class: 30,
            clutter: 0.08,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HpnetError::Config(m));
        if self.coarse.len() < 2 {
            return err("synthetic spec needs at least 2 coarse classes".into());
        }
        if self.image_size < 8 {
            return err(format!("image size {} is below 8", self.image_size));
        }
        let mut names = BTreeSet::new();
        for n in self
            .coarse
            .iter()
            .map(|c| &c.name)
            .chain(self.fine.iter().chain(&self.novel).map(|f| &f.name))
        {
            if !names.insert(n.as_str()) {
                return err(format!("class name {n} is used twice"));
            }
        }
        let mut recipes = Vec::new();
        for c in &self.coarse {
            let count = self.fine.iter().filter(|f| f.coarse == c.name).count();
            if count < 2 {
                return err(format!(
                    "coarse class {} has {count} fine classes, needs 2",
                    c.name
                ));
            }
        }
        for f in self.fine.iter().chain(&self.novel) {
            let Some(c) = self.coarse.iter().find(|c| c.name == f.coarse) else {
                return err(format!(
                    "fine class {} names unknown coarse class {}",
                    f.name, f.coarse
                ));
            };
            let key = (c.shape, f.fill, f.color.map(|c| c.map(f64::to_bits)));
            if recipes.contains(&key) {
                return err(format!(
                    "recipe collision: {} repeats another class's recipe",
                    f.name
                ));
            }
            if let Some(col) = f.color {
                if !col.iter().all(|v| (0.0..=1.0).contains(v)) {
                    return err(format!("color of {} outside [0, 1]", f.name));
                }
            }
            recipes.push(key);
        }
        if !(self.clutter.is_finite() && (0.0..=0.5).contains(&self.clutter)) {
            return err(format!("clutter {} outside [0, 0.5]", self.clutter));
        }
        Ok(())
    }

    /// Root → coarse classes → fine classes, in spec order.
    pub fn taxonomy_json(&self) -> String {
        let coarse: Vec<serde_json::Value> = self
            .coarse
            .iter()
            .map(|c| {
                let children: Vec<serde_json::Value> = self
                    .fine
                    .iter()
                    .filter(|f| f.coarse == c.name)
                    .map(|f| serde_json::json!({ "name": f.name }))
                    .collect();
                serde_json::json!({ "name": c.name, "children": children })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "name": "root", "children": coarse }))
            .expect("serializable")
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::parse(&self.taxonomy_json())
    }

    fn item_rng(&self, split: Split, class: &str, idx: usize) -> ChaCha8Rng {
        let digest = Sha256::digest(format!("{}/{}/{class}/{idx}", self.seed, split.as_str()));
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn render(
        &self,
        shape: Shape,
        fill: Fill,
        color: Option<[f64; 3]>,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        let s = self.image_size;
        let sf = s as f64;
        let mut img = vec![0.0; 3 * s * s];
        let base: f64 = rng.gen_range(0.25..0.55);
        for v in img.iter_mut() {
            *v = base + rng.gen_range(-self.clutter..=self.clutter);
        }
        // gray distractor blocks
        for _ in 0..3 {
            let g: f64 = rng.gen_range(0.1..0.7);
            let big = (s / 6).max(2);
            let (bw, bh) = (rng.gen_range(1..=big), rng.gen_range(1..=big));
            let (bx, by) = (rng.gen_range(0..s - bw), rng.gen_range(0..s - bh));
            for y in by..by + bh {
                for x in bx..bx + bw {
                    for c in 0..3 {
                        img[(c * s + y) * s + x] = g;
                    }
                }
            }
        }
        let r = rng.gen_range(0.18..0.28) * sf;
        let cx = rng.gen_range(0.3..0.7) * sf;
        let cy = rng.gen_range(0.3..0.7) * sf;
        let color = color.unwrap_or_else(|| {
            hsv_to_rgb(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.6..=1.0),
                rng.gen_range(0.65..=1.0),
            )
        });
        let paint = color.map(|c| (c + rng.gen_range(-0.06..=0.06)).clamp(0.0, 1.0));
        let band = (0.25 * r).max(1.5);
        let period = (r / 3.0).max(2.0);
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if !shape.contains(dx, dy, r) {
                    continue;
                }
                let border = [(band, 0.0), (-band, 0.0), (0.0, band), (0.0, -band)]
                    .iter()
                    .any(|&(ox, oy)| !shape.contains(dx + ox, dy + oy, r));
                let cell = |v: f64| (v / period).floor() as i64;
                let on = border
                    || match fill {
                        Fill::Solid => true,
                        Fill::Outline => false,
                        Fill::Striped => cell(dx + dy).rem_euclid(2) == 0,
                        Fill::Checkered => (cell(dx) + cell(dy)).rem_euclid(2) == 0,
                    };
                if on {
                    for c in 0..3 {
                        img[(c * s + y) * s + x] = paint[c];
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(vec![3, s, s], img).expect("sized image")
    }

    fn split_items(&self, split: Split, recipes: &[FineRecipe], count: usize) -> Vec<LabeledItem> {
        let mut items = Vec::with_capacity(recipes.len() * count);
        for f in recipes {
            let shape = self
                .coarse
                .iter()
                .find(|c| c.name == f.coarse)
                .expect("validated")
                .shape;
            for idx in 0..count {
                let mut rng = self.item_rng(split, &f.name, idx);
                items.push(LabeledItem {
                    id: format!("{}/{}/{idx:04}", split.as_str(), f.name),
                    image: self.render(shape, f.fill, f.color, &mut rng),
                    label: HierarchicalLabel::new([f.coarse.clone(), f.name.clone()]),
                });
            }
        }
        items
    }

    pub fn generate(&self) -> Result<SyntheticSets> {
        self.validate()?;
        let make = |split, recipes: &[FineRecipe], n| {
            LabeledDataset::new(split, self.split_items(split, recipes, n))
        };
        Ok(SyntheticSets {
            train: make(Split::Train, &self.fine, self.train_per_class),
            val: make(Split::Val, &self.fine, self.val_per_class),
            test: make(Split::Test, &self.fine, self.test_per_class),
            novel: make(Split::Novel, &self.novel, self.novel_per_class),
        })
    }
}
