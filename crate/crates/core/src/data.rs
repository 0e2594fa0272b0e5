//! Dataset ingestion and batch preparation.
//!
//! Supported sources: the two CIFAR binary layouts, an image-folder layout
//! (`root/<split>/<class>/*.png|jpg`), and a procedural `synthetic` dataset
//! for machinery tests. Nothing is ever downloaded; missing files surface as
//! ingestion errors naming the paths that were probed.
//!
//! Normalization statistics are always computed from the training split and
//! cached beside the data so evaluation runs reuse them.

use crate::error::{LfmaError, Result};
use crate::nn::{fromf, Scalar};
use crate::rng::{stream_rng, Stream};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Which portion of a dataset to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = LfmaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(LfmaError::Config(format!(
                "unknown split '{other}'; expected train, val, or test"
            ))),
        }
    }
}

/// Everything needed to locate and shape a dataset.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub root_path: PathBuf,
    pub split: Split,
    /// When set, a stratified subset of this many images (equal per class,
    /// remainder dropped) replaces the full split.
    pub subset_size: Option<usize>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl DatasetSpec {
    pub fn with_split(&self, split: Split) -> DatasetSpec {
        DatasetSpec {
            split,
            ..self.clone()
        }
    }
}

/// An in-memory split: raw `u8` images (n, c, h, w) plus labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Array4<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-channel mean and standard deviation on the `[0, 1]` pixel scale.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Load the requested split, applying stratified subsetting when configured.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let mut ds = load_full_split(spec)?;
    if let Some(subset) = spec.subset_size {
        let keep = stratified_subset(&ds.labels, ds.num_classes, subset, seed)?;
        ds = select(&ds, &keep);
    }
    Ok(ds)
}

fn select(ds: &Dataset, idxs: &[usize]) -> Dataset {
    let (_, c, h, w) = ds.images.dim();
    let mut images = Array4::<u8>::zeros((idxs.len(), c, h, w));
    let mut labels = Vec::with_capacity(idxs.len());
    for (row, &i) in idxs.iter().enumerate() {
        images
            .index_axis_mut(ndarray::Axis(0), row)
            .assign(&ds.images.index_axis(ndarray::Axis(0), i));
        labels.push(ds.labels[i]);
    }
    Dataset {
        name: ds.name.clone(),
        split: ds.split,
        images,
        labels,
        num_classes: ds.num_classes,
    }
}

fn load_full_split(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.name.as_str() {
        "cifar10" | "cifar-10" => load_cifar10(spec),
        "cifar100" | "cifar-100" => load_cifar100(spec),
        "synthetic" => Ok(synthetic_split(spec)),
        _ => load_image_folder(spec),
    }
}

/// Train-split channel statistics, cached beside the data. The cache file is
/// rewritten if unreadable; failures to write are tolerated (stats are still
/// returned).
pub fn channel_stats(spec: &DatasetSpec) -> Result<ChannelStats> {
    if spec.name == "synthetic" {
        let train = synthetic_split(&spec.with_split(Split::Train));
        return Ok(compute_channel_stats(&train.images));
    }
    let cache = spec
        .root_path
        .join(format!(".lfma-{}-train-stats.json", spec.name));
    if let Ok(text) = std::fs::read_to_string(&cache) {
        if let Ok(stats) = serde_json::from_str::<ChannelStats>(&text) {
            return Ok(stats);
        }
    }
    let train = load_full_split(&spec.with_split(Split::Train))?;
    let stats = compute_channel_stats(&train.images);
    if let Ok(text) = serde_json::to_string_pretty(&stats) {
        let _ = std::fs::write(&cache, text);
    }
    Ok(stats)
}

/// Population mean/std per channel over every pixel, on the `[0, 1]` scale.
pub fn compute_channel_stats(images: &Array4<u8>) -> ChannelStats {
    let (n, c, h, w) = images.dim();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let view = images.index_axis(ndarray::Axis(1), ch);
        let sum: f64 = view.iter().map(|&v| v as f64 / 255.0).sum();
        let m = sum / count;
        let var: f64 = view
            .iter()
            .map(|&v| {
                let d = v as f64 / 255.0 - m;
                d * d
            })
            .sum::<f64>()
            / count;
        mean[ch] = m;
        std[ch] = var.sqrt();
    }
    ChannelStats { mean, std }
}

/// Deterministic stratified subset: `subset_size / num_classes` indices per
/// class (the remainder is dropped), drawn without replacement. Returned
/// indices are sorted ascending.
pub fn stratified_subset(
    labels: &[usize],
    num_classes: usize,
    subset_size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if num_classes == 0 || subset_size == 0 {
        return Err(LfmaError::Config(
            "stratified subset needs positive subset_size and num_classes".into(),
        ));
    }
    let per_class = subset_size / num_classes;
    if per_class == 0 {
        return Err(LfmaError::Config(format!(
            "subset_size {subset_size} is smaller than num_classes {num_classes}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(LfmaError::Ingestion(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        by_class[l].push(i);
    }
    let mut rng = stream_rng(seed, Stream::Subset, 0, 0);
    let mut chosen = Vec::with_capacity(per_class * num_classes);
    for (class, mut pool) in by_class.into_iter().enumerate() {
        if pool.len() < per_class {
            return Err(LfmaError::Config(format!(
                "class {class} has only {} samples; {per_class} per class requested",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..per_class]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// One-hot encode labels into an `(n, num_classes)` matrix.
pub fn one_hot<F: Scalar>(labels: &[usize], num_classes: usize) -> Result<Array2<F>> {
    let mut out = Array2::<F>::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(LfmaError::Argument(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        out[(i, l)] = F::one();
    }
    Ok(out)
}

fn normalizer(stats: &ChannelStats, channels: usize) -> Result<Vec<(f64, f64)>> {
    if stats.mean.len() != channels || stats.std.len() != channels {
        return Err(LfmaError::Shape(format!(
            "channel stats cover {} channels but images have {channels}",
            stats.mean.len()
        )));
    }
    Ok((0..channels)
        .map(|c| {
            let s = if stats.std[c] > 0.0 { stats.std[c] } else { 1.0 };
            (stats.mean[c], s)
        })
        .collect())
}

/// Training-time batch assembly: pad-`pad` zero borders, random crop back to
/// the original size, horizontal flip with probability 1/2, then per-channel
/// normalization. Per sample the draw order is crop-y, crop-x, flip.
pub fn augment_train_batch<F: Scalar>(
    ds: &Dataset,
    stats: &ChannelStats,
    idxs: &[usize],
    pad: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<F>, Vec<usize>)> {
    let (_, c, h, w) = ds.images.dim();
    let norms = normalizer(stats, c)?;
    let mut out = Array4::<F>::zeros((idxs.len(), c, h, w));
    let mut labels = Vec::with_capacity(idxs.len());
    for (row, &i) in idxs.iter().enumerate() {
        check_index(ds, i)?;
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        let flip = rng.random_range(0..2u32) == 1;
        let img = ds.images.index_axis(ndarray::Axis(0), i);
        for ch in 0..c {
            let (mean, std) = norms[ch];
            for y in 0..h {
                for x in 0..w {
                    // Position in the padded image; outside the original
                    // bounds the padding value is zero (black).
                    let py = y + dy;
                    let px = x + dx;
                    let v = if py >= pad && py < pad + h && px >= pad && px < pad + w {
                        let sx = if flip { w - 1 - (px - pad) } else { px - pad };
                        img[(ch, py - pad, sx)] as f64 / 255.0
                    } else {
                        0.0
                    };
                    out[(row, ch, y, x)] = fromf((v - mean) / std);
                }
            }
        }
        labels.push(ds.labels[i]);
    }
    Ok((out, labels))
}

/// Evaluation-time batch assembly: normalization only.
pub fn eval_batch<F: Scalar>(
    ds: &Dataset,
    stats: &ChannelStats,
    idxs: &[usize],
) -> Result<(Array4<F>, Vec<usize>)> {
    let (_, c, h, w) = ds.images.dim();
    let norms = normalizer(stats, c)?;
    let mut out = Array4::<F>::zeros((idxs.len(), c, h, w));
    let mut labels = Vec::with_capacity(idxs.len());
    for (row, &i) in idxs.iter().enumerate() {
        check_index(ds, i)?;
        let img = ds.images.index_axis(ndarray::Axis(0), i);
        for ch in 0..c {
            let (mean, std) = norms[ch];
            for y in 0..h {
                for x in 0..w {
                    out[(row, ch, y, x)] = fromf((img[(ch, y, x)] as f64 / 255.0 - mean) / std);
                }
            }
        }
        labels.push(ds.labels[i]);
    }
    Ok((out, labels))
}

fn check_index(ds: &Dataset, i: usize) -> Result<()> {
    if i >= ds.len() {
        return Err(LfmaError::Argument(format!(
            "sample index {i} out of range for dataset of {}",
            ds.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CIFAR binary layouts
// ---------------------------------------------------------------------------

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE;

fn check_cifar_spec(spec: &DatasetSpec, classes: usize) -> Result<()> {
    if spec.num_classes != classes {
        return Err(LfmaError::Config(format!(
            "{} has {classes} classes, but the config says {}",
            spec.name, spec.num_classes
        )));
    }
    if spec.image_size != CIFAR_SIDE {
        return Err(LfmaError::Config(format!(
            "{} images are {CIFAR_SIDE}x{CIFAR_SIDE}, but the config says {}",
            spec.name, spec.image_size
        )));
    }
    Ok(())
}

/// Locate a data file either directly under the root or inside the canonical
/// extraction directory.
fn probe(root: &Path, canonical_dir: &str, file: &str) -> Result<PathBuf> {
    let direct = root.join(file);
    if direct.is_file() {
        return Ok(direct);
    }
    let nested = root.join(canonical_dir).join(file);
    if nested.is_file() {
        return Ok(nested);
    }
    Err(LfmaError::Ingestion(format!(
        "missing data file: looked for {} and {}",
        direct.display(),
        nested.display()
    )))
}

fn read_cifar_records(
    path: &Path,
    label_bytes: usize,
    label_offset: usize,
    images: &mut Vec<u8>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| LfmaError::io(path, e))?;
    let record = label_bytes + 3 * CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(LfmaError::Ingestion(format!(
            "{}: size {} is not a multiple of the {record}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(record) {
        labels.push(rec[label_offset] as usize);
        images.extend_from_slice(&rec[label_bytes..]);
    }
    Ok(())
}

fn cifar_dataset(
    spec: &DatasetSpec,
    files: &[PathBuf],
    label_bytes: usize,
    label_offset: usize,
) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        read_cifar_records(f, label_bytes, label_offset, &mut images, &mut labels)?;
    }
    let n = labels.len();
    let images = Array4::from_shape_vec((n, 3, CIFAR_SIDE, CIFAR_SIDE), images)
        .expect("record arithmetic guarantees the element count");
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(LfmaError::Ingestion(format!(
            "{}: label {bad} out of range for {} classes",
            spec.name, spec.num_classes
        )));
    }
    Ok(Dataset {
        name: spec.name.clone(),
        split: spec.split,
        images,
        labels,
        num_classes: spec.num_classes,
    })
}

fn load_cifar10(spec: &DatasetSpec) -> Result<Dataset> {
    check_cifar_spec(spec, 10)?;
    const DIR: &str = "cifar-10-batches-bin";
    let files = match spec.split {
        Split::Train => (1..=5)
            .map(|i| probe(&spec.root_path, DIR, &format!("data_batch_{i}.bin")))
            .collect::<Result<Vec<_>>>()?,
        // CIFAR ships no validation split; `val` aliases the test files.
        Split::Val | Split::Test => vec![probe(&spec.root_path, DIR, "test_batch.bin")?],
    };
    cifar_dataset(spec, &files, 1, 0)
}

fn load_cifar100(spec: &DatasetSpec) -> Result<Dataset> {
    check_cifar_spec(spec, 100)?;
    const DIR: &str = "cifar-100-binary";
    let file = match spec.split {
        Split::Train => probe(&spec.root_path, DIR, "train.bin")?,
        Split::Val | Split::Test => probe(&spec.root_path, DIR, "test.bin")?,
    };
    // Records carry a coarse then a fine label; training targets the fine one.
    cifar_dataset(spec, &[file], 2, 1)
}

// ---------------------------------------------------------------------------
// Image-folder layout: root/<name>/<split>/<class>/*.png|jpg|jpeg
// ---------------------------------------------------------------------------

fn load_image_folder(spec: &DatasetSpec) -> Result<Dataset> {
    let split_dir = spec
        .root_path
        .join(&spec.name)
        .join(spec.split.to_string());
    if !split_dir.is_dir() {
        return Err(LfmaError::Ingestion(format!(
            "missing split directory {}",
            split_dir.display()
        )));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = std::fs::read_dir(&split_dir)
        .map_err(|e| LfmaError::io(&split_dir, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_dir())
        .map(|entry| (entry.file_name().to_string_lossy().into_owned(), entry.path()))
        .collect();
    class_dirs.sort();
    if class_dirs.len() != spec.num_classes {
        return Err(LfmaError::Config(format!(
            "{} holds {} class directories, but the config says {}",
            split_dir.display(),
            class_dirs.len(),
            spec.num_classes
        )));
    }
    let side = spec.image_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class_idx, (_, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| LfmaError::io(dir, e))?
            .filter_map(|entry| entry.ok())
            .map(|entry| entry.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| LfmaError::Ingestion(format!("{}: {e}", file.display())))?
                .into_rgb8();
            let img = if (img.width() as usize, img.height() as usize) == (side, side) {
                img
            } else {
                image::imageops::resize(
                    &img,
                    side as u32,
                    side as u32,
                    image::imageops::FilterType::Triangle,
                )
            };
            // HWC -> CHW
            for ch in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        images.push(img.get_pixel(x as u32, y as u32)[ch]);
                    }
                }
            }
            labels.push(class_idx);
        }
    }
    if labels.is_empty() {
        return Err(LfmaError::Ingestion(format!(
            "no images found under {}",
            split_dir.display()
        )));
    }
    let n = labels.len();
    Ok(Dataset {
        name: spec.name.clone(),
        split: spec.split,
        images: Array4::from_shape_vec((n, 3, side, side), images).expect("consistent counts"),
        labels,
        num_classes: spec.num_classes,
    })
}

// ---------------------------------------------------------------------------
// Synthetic dataset: class-conditioned colors and stripes plus noise.
// Contents depend only on (split, num_classes, image_size, size), never on
// the run seed, so different training seeds see the same data.
// ---------------------------------------------------------------------------

const SYNTH_KEY: u64 = 0xD47A;

fn synthetic_split(spec: &DatasetSpec) -> Dataset {
    let default_len = match spec.split {
        Split::Train => 512,
        Split::Val | Split::Test => 256,
    };
    let requested = spec.subset_size.unwrap_or(default_len).max(spec.num_classes);
    // Round up to a multiple of the class count so stratification is exact.
    let n = requested.div_ceil(spec.num_classes) * spec.num_classes;
    let s = spec.image_size;
    let c = spec.num_classes;
    let mut rng = stream_rng(SYNTH_KEY, Stream::Synth, spec.split as u64, 0);
    let mut images = Array4::<u8>::zeros((n, 3, s, s));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % c;
        let theta = std::f64::consts::TAU * class as f64 / c as f64;
        let base = [
            128.0 + 80.0 * theta.sin(),
            128.0 + 80.0 * (theta + std::f64::consts::TAU / 3.0).sin(),
            128.0 + 80.0 * (theta + 2.0 * std::f64::consts::TAU / 3.0).sin(),
        ];
        let freq = 1.0 + (class % 4) as f64;
        for ch in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let stripe =
                        20.0 * (std::f64::consts::TAU * freq * (x + y) as f64 / s as f64).sin();
                    let noise = rng.random_range(-18.0..18.0);
                    let v = (base[ch] + stripe + noise).clamp(0.0, 255.0);
                    images[(i, ch, y, x)] = v.round() as u8;
                }
            }
        }
        labels.push(class);
    }
    Dataset {
        name: spec.name.clone(),
        split: spec.split,
        images,
        labels,
        num_classes: c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_spec(split: Split) -> DatasetSpec {
        DatasetSpec {
            name: "synthetic".into(),
            root_path: PathBuf::from("/nonexistent"),
            split,
            subset_size: None,
            num_classes: 4,
            image_size: 8,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_split_dependent() {
        let a = load_dataset(&synth_spec(Split::Train), 0).unwrap();
        let b = load_dataset(&synth_spec(Split::Train), 99).unwrap();
        assert_eq!(a.images, b.images, "contents must not depend on run seed");
        assert_eq!(a.len(), 512);
        assert_eq!(a.class_counts(), vec![128; 4]);
        let t = load_dataset(&synth_spec(Split::Test), 0).unwrap();
        assert_eq!(t.len(), 256);
        assert_ne!(
            a.images.index_axis(ndarray::Axis(0), 0),
            t.images.index_axis(ndarray::Axis(0), 0)
        );
    }

    #[test]
    fn stratified_subset_is_equal_per_class_and_seeded() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let idx = stratified_subset(&labels, 5, 23, 7).unwrap();
        // 23 / 5 = 4 per class, remainder dropped.
        assert_eq!(idx.len(), 20);
        let mut counts = vec![0usize; 5];
        for &i in &idx {
            counts[labels[i]] += 1;
        }
        assert_eq!(counts, vec![4; 5]);
        assert!(idx.windows(2).all(|w| w[0] < w[1]), "sorted, no duplicates");
        assert_eq!(idx, stratified_subset(&labels, 5, 23, 7).unwrap());
        assert_ne!(idx, stratified_subset(&labels, 5, 23, 8).unwrap());
        // Requesting more than a class can supply fails.
        assert!(stratified_subset(&labels, 5, 500, 0).is_err());
        assert!(stratified_subset(&labels, 5, 3, 0).is_err());
    }

    #[test]
    fn subsetting_through_load_dataset() {
        let mut spec = synth_spec(Split::Train);
        spec.subset_size = Some(17);
        let ds = load_dataset(&spec, 3).unwrap();
        assert_eq!(ds.len(), 16);
        assert_eq!(ds.class_counts(), vec![4; 4]);
    }

    #[test]
    fn one_hot_encodes_and_validates() {
        let m = one_hot::<f64>(&[2, 0, 1], 3).unwrap();
        assert_eq!(m.shape(), &[3, 3]);
        assert_eq!(m[(0, 2)], 1.0);
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m.sum(), 3.0);
        assert!(one_hot::<f64>(&[3], 3).is_err());
    }

    #[test]
    fn channel_stats_match_hand_computation() {
        // Two 1x1 images, 2 channels: ch0 = {0, 255}, ch1 = {255, 255}.
        let images = Array4::from_shape_vec((2, 2, 1, 1), vec![0u8, 255, 255, 255]).unwrap();
        let stats = compute_channel_stats(&images);
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.std[0] - 0.5).abs() < 1e-12);
        assert!((stats.mean[1] - 1.0).abs() < 1e-12);
        assert!(stats.std[1].abs() < 1e-12);
        // Zero-std channels normalize with divisor 1 instead of exploding.
        let ds = Dataset {
            name: "t".into(),
            split: Split::Train,
            images,
            labels: vec![0, 1],
            num_classes: 2,
        };
        let (batch, labels) = eval_batch::<f64>(&ds, &stats, &[0, 1]).unwrap();
        assert_eq!(labels, vec![0, 1]);
        assert!(batch.iter().all(|v| v.is_finite()));
        assert!((batch[(0, 1, 0, 0)] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn eval_batch_applies_the_normalization_formula() {
        let ds = load_dataset(&synth_spec(Split::Test), 0).unwrap();
        let stats = channel_stats(&synth_spec(Split::Test)).unwrap();
        let (batch, labels) = eval_batch::<f64>(&ds, &stats, &[5, 2]).unwrap();
        assert_eq!(batch.dim(), (2, 3, 8, 8));
        assert_eq!(labels, vec![ds.labels[5], ds.labels[2]]);
        let manual =
            (ds.images[(5, 1, 3, 4)] as f64 / 255.0 - stats.mean[1]) / stats.std[1];
        assert!((batch[(0, 1, 3, 4)] - manual).abs() < 1e-12);
    }

    #[test]
    fn augmentation_with_zero_pad_is_identity_or_mirror() {
        let ds = load_dataset(&synth_spec(Split::Train), 0).unwrap();
        let stats = channel_stats(&synth_spec(Split::Train)).unwrap();
        let idxs: Vec<usize> = (0..16).collect();
        let mut rng = stream_rng(5, Stream::Augment, 1, 0);
        let (aug, _) = augment_train_batch::<f64>(&ds, &stats, &idxs, 0, &mut rng).unwrap();
        let (plain, _) = eval_batch::<f64>(&ds, &stats, &idxs).unwrap();
        let mut flips = 0;
        for i in 0..16 {
            let a = aug.index_axis(ndarray::Axis(0), i);
            let p = plain.index_axis(ndarray::Axis(0), i);
            let mirrored = p.slice(ndarray::s![.., .., ..;-1]);
            if a == p {
                continue;
            }
            assert_eq!(a, mirrored, "sample {i} is neither identity nor mirror");
            flips += 1;
        }
        assert!(flips > 0, "with 16 samples at p=1/2 some flip is expected");
    }

    #[test]
    fn augmentation_is_seeded_and_crops_shift_content() {
        let ds = load_dataset(&synth_spec(Split::Train), 0).unwrap();
        let stats = channel_stats(&synth_spec(Split::Train)).unwrap();
        let idxs: Vec<usize> = (0..8).collect();
        let (a, _) = augment_train_batch::<f64>(
            &ds,
            &stats,
            &idxs,
            4,
            &mut stream_rng(5, Stream::Augment, 2, 3),
        )
        .unwrap();
        let (b, _) = augment_train_batch::<f64>(
            &ds,
            &stats,
            &idxs,
            4,
            &mut stream_rng(5, Stream::Augment, 2, 3),
        )
        .unwrap();
        assert_eq!(a, b);
        let (c, _) = augment_train_batch::<f64>(
            &ds,
            &stats,
            &idxs,
            4,
            &mut stream_rng(5, Stream::Augment, 2, 4),
        )
        .unwrap();
        assert_ne!(a, c, "different batch keys draw different augmentations");
    }

    #[test]
    fn cifar10_fixture_roundtrip_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        // Three records per training file, labels cycling 0..10.
        let mut label = 0u8;
        for i in 1..=5 {
            let mut bytes = Vec::new();
            for _ in 0..3 {
                bytes.push(label % 10);
                bytes.extend(std::iter::repeat_n(label.wrapping_mul(7), 3072));
                label += 1;
            }
            std::fs::write(root.join(format!("data_batch_{i}.bin")), &bytes).unwrap();
        }
        let mut test_bytes = Vec::new();
        test_bytes.push(9);
        test_bytes.extend(std::iter::repeat_n(200u8, 3072));
        std::fs::write(root.join("test_batch.bin"), &test_bytes).unwrap();

        let spec = DatasetSpec {
            name: "cifar10".into(),
            root_path: root.clone(),
            split: Split::Train,
            subset_size: None,
            num_classes: 10,
            image_size: 32,
        };
        let train = load_dataset(&spec, 0).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(train.labels[..4], [0, 1, 2, 3]);
        assert_eq!(train.images[(1, 0, 0, 0)], 7);
        assert_eq!(train.images.dim(), (15, 3, 32, 32));

        // `val` aliases the test files for CIFAR.
        let val = load_dataset(&spec.with_split(Split::Val), 0).unwrap();
        let test = load_dataset(&spec.with_split(Split::Test), 0).unwrap();
        assert_eq!(val.labels, test.labels);
        assert_eq!(val.labels, vec![9]);
        assert_eq!(val.images[(0, 2, 31, 31)], 200);

        // Missing file reports every probed path.
        std::fs::remove_file(root.join("data_batch_3.bin")).unwrap();
        let err = load_dataset(&spec, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data_batch_3.bin"), "{msg}");
        assert!(msg.contains("cifar-10-batches-bin"), "{msg}");

        // Truncated files are rejected.
        std::fs::write(root.join("data_batch_3.bin"), [0u8; 100]).unwrap();
        assert!(load_dataset(&spec, 0).is_err());

        // Wrong spec geometry is a config error.
        let mut bad = spec.clone();
        bad.num_classes = 7;
        assert!(load_dataset(&bad, 0).unwrap_err().is_config());
    }

    #[test]
    fn cifar100_uses_the_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("cifar-100-binary");
        std::fs::create_dir(&nested).unwrap();
        let mut bytes = Vec::new();
        for (coarse, fine) in [(3u8, 42u8), (7, 99)] {
            bytes.push(coarse);
            bytes.push(fine);
            bytes.extend(std::iter::repeat_n(fine, 3072));
        }
        std::fs::write(nested.join("train.bin"), &bytes).unwrap();
        std::fs::write(nested.join("test.bin"), &bytes).unwrap();
        let spec = DatasetSpec {
            name: "cifar100".into(),
            root_path: dir.path().to_path_buf(),
            split: Split::Train,
            subset_size: None,
            num_classes: 100,
            image_size: 32,
        };
        let ds = load_dataset(&spec, 0).unwrap();
        assert_eq!(ds.labels, vec![42, 99]);
        assert_eq!(ds.images[(0, 0, 0, 0)], 42);
    }

    #[test]
    fn stats_cache_is_written_and_reused() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut bytes = Vec::new();
        for label in 0..10u8 {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(label * 20, 3072));
        }
        for i in 1..=5 {
            std::fs::write(root.join(format!("data_batch_{i}.bin")), &bytes).unwrap();
        }
        let spec = DatasetSpec {
            name: "cifar10".into(),
            root_path: root.clone(),
            split: Split::Train,
            subset_size: None,
            num_classes: 10,
            image_size: 32,
        };
        let first = channel_stats(&spec).unwrap();
        let cache = root.join(".lfma-cifar10-train-stats.json");
        assert!(cache.is_file(), "stats cached beside the data");
        // With the cache present, the train files are no longer needed.
        for i in 1..=5 {
            std::fs::remove_file(root.join(format!("data_batch_{i}.bin"))).unwrap();
        }
        let second = channel_stats(&spec).unwrap();
        assert_eq!(first, second);
        // A corrupt cache forces recomputation, which now fails honestly.
        std::fs::write(&cache, "not json").unwrap();
        assert!(channel_stats(&spec).is_err());
    }

    #[test]
    fn image_folder_layout_loads_sorted_classes() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("petals").join("train");
        for (class, shade) in [("aster", 60u8), ("zinnia", 220u8)] {
            let cdir = base.join(class);
            std::fs::create_dir_all(&cdir).unwrap();
            for i in 0..2 {
                let img = image::RgbImage::from_pixel(8, 8, image::Rgb([shade, i * 100, 10]));
                img.save(cdir.join(format!("{i}.png"))).unwrap();
            }
        }
        let spec = DatasetSpec {
            name: "petals".into(),
            root_path: dir.path().to_path_buf(),
            split: Split::Train,
            subset_size: None,
            num_classes: 2,
            image_size: 8,
        };
        let ds = load_dataset(&spec, 0).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels, vec![0, 0, 1, 1]);
        assert_eq!(ds.images[(0, 0, 0, 0)], 60);
        assert_eq!(ds.images[(2, 0, 0, 0)], 220);
        // Larger target size triggers a resize instead of failing.
        let mut resized = spec.clone();
        resized.image_size = 16;
        let ds2 = load_dataset(&resized, 0).unwrap();
        assert_eq!(ds2.images.dim(), (4, 3, 16, 16));
        // Missing split directory is an ingestion error naming the path.
        let err = load_dataset(&spec.with_split(Split::Val), 0).unwrap_err();
        assert!(err.to_string().contains("petals"), "{err}");
        // Class-count mismatch is a config error.
        let mut bad = spec.clone();
        bad.num_classes = 3;
        assert!(load_dataset(&bad, 0).unwrap_err().is_config());
    }
}
