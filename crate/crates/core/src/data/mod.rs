//! Labeled image datasets: directory ingestion, splitting, augmentation and
//! the synthetic shapes generator.

mod augment;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{augment_crop, noise_batch, resize_bilinear, CropMode};
pub use synthetic::{CoarseRecipe, Fill, FineRecipe, Shape, SyntheticSets, SyntheticSpec};

use crate::error::{HpnetError, Result};
use crate::numerics::Tensor;
use crate::taxonomy::{HierarchicalLabel, Taxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Novel => "novel",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub id: String,
    /// `[C, H, W]` with values in [0, 1].
    pub image: Tensor,
    pub label: HierarchicalLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub split: Split,
    pub items: Vec<LabeledItem>,
}

impl LabeledDataset {
    pub fn new(split: Split, items: Vec<LabeledItem>) -> Self {
        LabeledDataset { split, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.items.iter().map(|i| &i.image).collect()
    }

    pub fn labels(&self) -> Vec<HierarchicalLabel> {
        self.items.iter().map(|i| i.label.clone()).collect()
    }

    /// Stacks the selected items into a `[n, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<HierarchicalLabel>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.items[i].image).collect();
        let labels = indices
            .iter()
            .map(|&i| self.items[i].label.clone())
            .collect();
        Ok((Tensor::stack(&images)?, labels))
    }

    /// Full labels must validate; the novel split only needs a valid prefix.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        for item in &self.items {
            let res = if self.split == Split::Novel {
                taxonomy.validate_prefix(&HierarchicalLabel::new(item.label.coarse()))
            } else {
                taxonomy.validate_label(&item.label)
            };
            res.map_err(|e| HpnetError::Data(format!("item {}: {e}", item.id)))?;
        }
        Ok(())
    }

    /// Item count per leaf name (last path element).
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts
                .entry(item.label.leaf().unwrap_or("").to_string())
                .or_insert(0) += 1;
        }
        counts
    }

    pub fn filter(&self, keep: impl Fn(&LabeledItem) -> bool) -> LabeledDataset {
        LabeledDataset {
            split: self.split,
            items: self.items.iter().filter(|i| keep(i)).cloned().collect(),
        }
    }
}

/// Content hash of one image: SHA-256 over its shape and little-endian values.
pub fn image_hash(image: &Tensor) -> String {
    let mut h = Sha256::new();
    for &d in image.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &v in image.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::new(vec![3, h, w], {
        let mut data = vec![0.0; 3 * h * w];
        for (p, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + p] = px[c] as f64 / 255.0;
            }
        }
        data
    })
}

/// Writes a `[3, H, W]` (or `[1, H, W]`) image in [0, 1] as 8-bit PNG.
pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => {
            return Err(HpnetError::Dimension(format!(
                "write_png expects [1|3, H, W], got {s:?}"
            )))
        }
    };
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            let v = image.data()[(ch % c) * h * w + p];
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    img.save(path)?;
    Ok(())
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "ppm")
    )
}

/// Validation images held out of each class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    Count(usize),
    /// Rounded fraction of the class, at least one when the class has two or more images.
    Fraction(f64),
}

impl Holdout {
    /// 50 of every 1300 images.
    pub const DEFAULT_FRACTION: f64 = 50.0 / 1300.0;

    pub fn count(self, class_size: usize) -> usize {
        match self {
            Holdout::Count(n) => n,
            Holdout::Fraction(f) if class_size >= 2 => {
                ((class_size as f64 * f).round() as usize).clamp(1, class_size - 1)
            }
            Holdout::Fraction(_) => 0,
        }
    }
}

impl Default for Holdout {
    fn default() -> Self {
        Holdout::Fraction(Holdout::DEFAULT_FRACTION)
    }
}

fn image_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| HpnetError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn sub_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| HpnetError::io(dir, e))? {
        let entry = entry.map_err(|e| HpnetError::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Reads `root/<leaf>/*.png|ppm`. Items are sorted by path; the last
/// `holdout.count(n)` images of every class form the validation split.
pub fn load_directory(
    root: &Path,
    taxonomy: &Taxonomy,
    holdout: Holdout,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let class_dirs = sub_dirs(root)?;
    let unknown: Vec<String> = class_dirs
        .iter()
        .filter_map(|d| d.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .filter(|n| taxonomy.find(n).is_none_or(|id| !taxonomy.is_leaf(id)))
        .collect();
    if !unknown.is_empty() {
        return Err(HpnetError::Data(format!(
            "directories are not taxonomy leaves: {}",
            unknown.join(", ")
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for dir in class_dirs {
        let class = dir
            .file_name()
            .and_then(|n| n.to_str())
            .expect("checked above")
            .to_string();
        let label = taxonomy.label_for(taxonomy.find(&class).expect("checked above"));
        let files = image_files(&dir)?;
        let holdout = holdout.count(files.len());
        if files.is_empty() || files.len() <= holdout {
            return Err(HpnetError::Data(format!(
                "class {class} has {} images, cannot hold out {holdout}",
                files.len()
            )));
        }
        let cut = files.len() - holdout;
        for (i, path) in files.iter().enumerate() {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            let item = LabeledItem {
                id: format!("{class}/{name}"),
                image: read_image(path)?,
                label: label.clone(),
            };
            if i < cut {
                train.push(item);
            } else {
                val.push(item);
            }
        }
    }
    Ok((
        LabeledDataset::new(Split::Train, train),
        LabeledDataset::new(Split::Val, val),
    ))
}

/// Reads novel data laid out as `root/<parent>/<novel-class>/*.png|ppm`,
/// where `<parent>` is a non-root internal node of the taxonomy and
/// `<novel-class>` is not a taxonomy class.
pub fn load_novel_directory(root: &Path, taxonomy: &Taxonomy) -> Result<LabeledDataset> {
    let mut items = Vec::new();
    for pdir in sub_dirs(root)? {
        let parent = dir_name(&pdir);
        let pid = taxonomy
            .find(&parent)
            .filter(|&id| !taxonomy.is_leaf(id) && id != taxonomy.root())
            .ok_or_else(|| {
                HpnetError::Data(format!(
                    "novel directory {parent} is not an internal taxonomy class"
                ))
            })?;
        let prefix = taxonomy.path_to(pid);
        for cdir in sub_dirs(&pdir)? {
            let class = dir_name(&cdir);
            if taxonomy.find(&class).is_some() {
                return Err(HpnetError::Data(format!(
                    "novel class {class} is already in the taxonomy"
                )));
            }
            let mut path: Vec<String> = prefix
                .iter()
                .filter(|&&n| n != taxonomy.root())
                .map(|&n| taxonomy.name(n).to_string())
                .collect();
            path.push(class.clone());
            for file in image_files(&cdir)? {
                items.push(LabeledItem {
                    id: format!("{parent}/{class}/{}", dir_name(&file)),
                    image: read_image(&file)?,
                    label: HierarchicalLabel::new(path.clone()),
                });
            }
        }
    }
    Ok(LabeledDataset::new(Split::Novel, items))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Vec<String>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

impl Manifest {
    pub fn build(seed: u64, sets: &[&LabeledDataset]) -> Self {
        let splits = sets
            .iter()
            .map(|d| {
                let entries = d
                    .items
                    .iter()
                    .map(|i| ManifestEntry {
                        id: i.id.clone(),
                        label: i.label.path.clone(),
                        sha256: image_hash(&i.image),
                    })
                    .collect();
                (d.split.as_str().to_string(), entries)
            })
            .collect();
        Manifest { seed, splits }
    }
}
