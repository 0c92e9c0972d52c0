//! Image ingestion and the experiment split protocol: a per-class holdout,
//! replication of scarce classes up to a target count, and stratified folds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 8] = ["ALB", "BET", "DOL", "LAG", "NoF", "Outros", "Shark", "YFT"];
/// Per-class sample counts of the full competition training tree.
pub const REFERENCE_COUNTS: [usize; 8] = [1719, 200, 117, 67, 465, 299, 176, 734];
/// Per-class holdout sizes; 150 images in total.
pub const DEFAULT_HOLDOUT: [usize; 8] = [25, 20, 15, 10, 20, 20, 20, 20];
pub const DEFAULT_BALANCE_TARGET: usize = 400;
pub const DEFAULT_FOLDS: usize = 5;
pub const INPUT_SIDE: usize = 48;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

// Stream ids keep the randomized steps independent under one seed.
const HOLDOUT_STREAM: u64 = 0x100;
const FOLD_STREAM: u64 = 0x200;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// 3×48×48, values in [0, 1]. Shared so replicas reuse the same pixels.
    pub pixels: Arc<Tensor>,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub counts: Vec<usize>,
}

impl ClassTable {
    pub fn tally(names: &[&str], images: &[LabeledImage]) -> Self {
        let mut counts = vec![0; names.len()];
        for img in images {
            counts[img.label] += 1;
        }
        ClassTable {
            names: names.iter().map(|s| s.to_string()).collect(),
            counts,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub classes: ClassTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Stretch the whole frame to the target square.
    #[default]
    Squash,
    /// Crop the central square first, then resize.
    CenterCrop,
}

/// Bilinear resize of an interleaved 8-bit RGB image to a `3 × side × side`
/// tensor scaled to [0, 1]. Sample positions use pixel-center alignment.
pub fn resize_image(rgb: &[u8], height: usize, width: usize, side: usize, mode: ResizeMode) -> Result<Tensor> {
    if height == 0 || width == 0 || side == 0 {
        return Err(Error::DegenerateShape(vec![height, width, side]));
    }
    if rgb.len() != height * width * 3 {
        return Err(Error::ShapeDataMismatch {
            shape: vec![height, width, 3],
            expected: height * width * 3,
            actual: rgb.len(),
        });
    }
    let (y_off, x_off, h, w) = match mode {
        ResizeMode::Squash => (0, 0, height, width),
        ResizeMode::CenterCrop => {
            let s = height.min(width);
            ((height - s) / 2, (width - s) / 2, s, s)
        }
    };
    let sample_axis = |o: usize, len: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * len as f64 / side as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let px = |y: usize, x: usize, c: usize| rgb[((y_off + y) * width + x_off + x) * 3 + c] as f64;
    let mut out = vec![0.0; 3 * side * side];
    for oy in 0..side {
        let (y0, y1, fy) = sample_axis(oy, h);
        for ox in 0..side {
            let (x0, x1, fx) = sample_axis(ox, w);
            for c in 0..3 {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bottom = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out[(c * side + oy) * side + ox] = (top * (1.0 - fy) + bottom * fy) / 255.0;
            }
        }
    }
    Tensor::new(vec![3, side, side], out)
}

pub fn decode_image(path: &Path, mode: ResizeMode) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    resize_image(rgb.as_raw(), h as usize, w as usize, INPUT_SIDE, mode)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Lists the image files under `dir`, sorted, warning about anything else.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for path in sorted_entries(dir)? {
        if path.is_file() && is_image(&path) {
            files.push(path);
        } else {
            log::warn!("skipping non-image entry {}", path.display());
        }
    }
    Ok(files)
}

/// Reads a directory-per-class tree. Subdirectories that are not class
/// names are skipped with a warning; a missing class directory counts 0.
pub fn load_dataset(root: &Path, mode: ResizeMode) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root is not a directory"),
        ));
    }
    let mut jobs: Vec<(PathBuf, usize, String)> = Vec::new();
    for path in sorted_entries(root)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if !path.is_dir() {
            continue;
        }
        let Some(label) = CLASS_NAMES.iter().position(|&c| c == name) else {
            log::warn!("skipping unknown class directory {}", path.display());
            continue;
        };
        for file in list_images(&path)? {
            let file_name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let id = format!("{name}/{file_name}");
            jobs.push((file, label, id));
        }
    }
    let images = jobs
        .into_par_iter()
        .map(|(path, label, source_id)| {
            decode_image(&path, mode).map(|pixels| LabeledImage {
                pixels: Arc::new(pixels),
                label,
                source_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = ClassTable::tally(&CLASS_NAMES, &images);
    Ok(Dataset { images, classes })
}

fn indices_by_class(images: &[LabeledImage], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, img) in images.iter().enumerate() {
        if img.label >= classes {
            return Err(Error::LabelOutOfRange { label: img.label, classes });
        }
        by_class[img.label].push(i);
    }
    Ok(by_class)
}

/// Seeded per-class sampling without replacement. Both halves keep the
/// input order.
pub fn holdout_split(
    images: &[LabeledImage],
    per_class: &[usize],
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let by_class = indices_by_class(images, per_class.len())?;
    let mut in_holdout = vec![false; images.len()];
    for (class, (mut members, &want)) in by_class.into_iter().zip(per_class).enumerate() {
        if want > members.len() {
            return Err(Error::InvalidConfig(format!(
                "holdout asks for {want} images of class {class} but only {} exist",
                members.len()
            )));
        }
        let mut rng = seeded_rng(seed, HOLDOUT_STREAM + class as u64);
        let (chosen, _) = members.partial_shuffle(&mut rng, want);
        for &i in chosen.iter() {
            in_holdout[i] = true;
        }
    }
    let (holdout, remainder): (Vec<_>, Vec<_>) = images
        .iter()
        .zip(&in_holdout)
        .partition(|(_, &held)| held);
    Ok((
        holdout.into_iter().map(|(img, _)| img.clone()).collect(),
        remainder.into_iter().map(|(img, _)| img.clone()).collect(),
    ))
}

/// Cyclically replicates every class below `target` up to exactly `target`
/// entries; larger classes pass through. Output is grouped by class.
pub fn balance_by_replication(remainder: &[LabeledImage], classes: usize, target: usize) -> Result<Vec<LabeledImage>> {
    if target == 0 {
        return Err(Error::InvalidConfig("balance target must be at least 1".into()));
    }
    let by_class = indices_by_class(remainder, classes)?;
    let mut out = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Empty(format!("class {class} has no images to replicate")));
        }
        if members.len() >= target {
            out.extend(members.iter().map(|&i| remainder[i].clone()));
        } else {
            out.extend((0..target).map(|j| remainder[members[j % members.len()]].clone()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub source_id: String,
    pub label: usize,
    pub fold: usize,
}

/// Fold assignment for every balanced entry plus the holdout ids, enough
/// to rebuild an experiment exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub folds: usize,
    /// Per class, in class order.
    pub holdout_ids: Vec<Vec<String>>,
    /// Index-aligned with the balanced dataset.
    pub entries: Vec<SplitEntry>,
    /// Copies of each source image among `entries`.
    pub multiplicity: BTreeMap<String, usize>,
}

impl SplitPlan {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].fold == fold).collect()
    }

    /// Entries outside `fold`.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].fold != fold).collect()
    }

    pub fn fold_class_counts(&self, fold: usize) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for e in self.entries.iter().filter(|e| e.fold == fold) {
            counts[e.label] += 1;
        }
        counts
    }

    /// Checks that the plan describes `balanced` entry for entry.
    pub fn matches(&self, balanced: &[LabeledImage]) -> bool {
        self.entries.len() == balanced.len()
            && self
                .entries
                .iter()
                .zip(balanced)
                .all(|(e, img)| e.source_id == img.source_id && e.label == img.label)
    }
}

/// Stratified split: each class is shuffled under the seed and dealt
/// round-robin into `k` folds.
pub fn kfold_split(balanced: &[LabeledImage], class_names: &[&str], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    let by_class = indices_by_class(balanced, class_names.len())?;
    let mut fold_of = vec![0; balanced.len()];
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < k {
            return Err(Error::InvalidConfig(format!(
                "class {} has {} entries, fewer than {k} folds",
                class_names[class],
                members.len()
            )));
        }
        let mut rng = seeded_rng(seed, FOLD_STREAM + class as u64);
        members.shuffle(&mut rng);
        for (j, i) in members.into_iter().enumerate() {
            fold_of[i] = j % k;
        }
    }
    let mut multiplicity = BTreeMap::new();
    for img in balanced {
        *multiplicity.entry(img.source_id.clone()).or_insert(0) += 1;
    }
    Ok(SplitPlan {
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        seed,
        folds: k,
        holdout_ids: vec![Vec::new(); class_names.len()],
        entries: balanced
            .iter()
            .zip(fold_of)
            .map(|(img, fold)| SplitEntry {
                source_id: img.source_id.clone(),
                label: img.label,
                fold,
            })
            .collect(),
        multiplicity,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub holdout_per_class: Vec<usize>,
    pub balance_target: usize,
    pub folds: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            holdout_per_class: DEFAULT_HOLDOUT.to_vec(),
            balance_target: DEFAULT_BALANCE_TARGET,
            folds: DEFAULT_FOLDS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub holdout: Vec<LabeledImage>,
    pub balanced: Vec<LabeledImage>,
    pub plan: SplitPlan,
}

/// Holdout cut, then replication of the remainder, then fold assignment.
pub fn prepare_splits(dataset: &Dataset, protocol: &ProtocolConfig, seed: u64) -> Result<PreparedData> {
    let names: Vec<&str> = dataset.classes.names.iter().map(String::as_str).collect();
    if protocol.holdout_per_class.len() != names.len() {
        return Err(Error::InvalidConfig(format!(
            "holdout needs one count per class ({}), got {}",
            names.len(),
            protocol.holdout_per_class.len()
        )));
    }
    let (holdout, remainder) = holdout_split(&dataset.images, &protocol.holdout_per_class, seed)?;
    let balanced = balance_by_replication(&remainder, names.len(), protocol.balance_target)?;
    let mut plan = kfold_split(&balanced, &names, protocol.folds, seed)?;
    for img in &holdout {
        plan.holdout_ids[img.label].push(img.source_id.clone());
    }
    Ok(PreparedData {
        holdout,
        balanced,
        plan,
    })
}
