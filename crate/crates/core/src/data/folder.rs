use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub image_size: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Keep at most this many images (0 = all), chosen by the split hash.
    pub max_images: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    /// Path relative to the dataset root, `/`-separated.
    pub name: String,
    pub path: PathBuf,
    pub split: Split,
    pub image: Image,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn images(&self, split: Split) -> Vec<Image> {
        self.items.iter().filter(|i| i.split == split).map(|i| i.image.clone()).collect()
    }

    pub fn items_of(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.items_of(split).count()
    }
}

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Image files under `root`, sorted by relative name.
pub fn list_images(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a readable directory", root.display())));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| Error::Dataset(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            let rel = p.strip_prefix(root).unwrap_or(p);
            let name = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.push((name, p.to_path_buf()));
        }
    }
    out.sort();
    Ok(out)
}

fn split_key(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

/// Orders names by a seeded hash, keeps at most `max` (0 = all), and cuts
/// the order into train / val / test blocks of `round(n·fraction)` items.
/// Returns `(index into names, split)` pairs in hash order.
pub fn assign_splits(names: &[String], train: f64, val: f64, seed: u64, max: usize) -> Vec<(usize, Split)> {
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by_cached_key(|&i| (split_key(seed, &names[i]), i));
    if max > 0 {
        order.truncate(max);
    }
    let n = order.len();
    let n_train = ((n as f64) * train).round() as usize;
    let n_val = (((n as f64) * val).round() as usize).min(n - n_train.min(n));
    order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            let s = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (i, s)
        })
        .collect()
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let files = list_images(&spec.root)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", spec.root.display())));
    }
    let names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    let mut assigned = assign_splits(&names, spec.train_fraction, spec.val_fraction, spec.seed, spec.max_images);
    // keep items in name order for stable image ids
    assigned.sort_unstable();
    let mut items = Vec::with_capacity(assigned.len());
    for (i, split) in assigned {
        let (name, path) = &files[i];
        let image = Image::load(path, Some(spec.image_size))?;
        items.push(DatasetItem {
            name: name.clone(),
            path: path.clone(),
            split,
            image,
        });
    }
    Ok(Dataset { items })
}
