//! Dataset ingestion and batching.
//!
//! CIFAR binaries are read from the standard batch files (one label byte,
//! two for CIFAR-100, followed by 3072 channel-planar pixels). Synthetic
//! data are Gaussian blobs around smooth per-class prototype images.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DatasetKind, ExperimentConfig};
use crate::error::{CssError, Result};

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Images stored channel-planar as `f32`, one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    shape: [usize; 3],
    classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        shape: [usize; 3],
        classes: usize,
    ) -> Result<Dataset> {
        let per = shape.iter().product::<usize>();
        if images.len() != per * labels.len() {
            return Err(CssError::Dataset(format!(
                "{} pixel values for {} images of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CssError::Dataset(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            classes: self.classes,
        }
    }

    /// Keeps `round(fraction * n_c)` (at least one) randomly chosen images of
    /// every class `c`, preserving the original order.
    pub fn stratified_subset(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CssError::InvalidArgument(format!(
                "subset fraction {fraction} outside (0, 1]"
            )));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut keep = Vec::new();
        for members in &mut by_class {
            if members.is_empty() {
                continue;
            }
            let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
            members.shuffle(&mut rng);
            keep.extend_from_slice(&members[..take]);
        }
        keep.sort_unstable();
        Ok(self.subset(&keep))
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let [c, h, w] = self.shape;
        let plane = h * w;
        (0..c)
            .map(|ch| {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for i in 0..self.len() {
                    for &v in &self.image(i)[ch * plane..(ch + 1) * plane] {
                        sum += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let n = (self.len() * plane) as f64;
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                (mean, var.sqrt().max(1e-8))
            })
            .collect()
    }

    pub fn normalize(&mut self, stats: &[(f64, f64)]) {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let per = c * plane;
        for (idx, v) in self.images.iter_mut().enumerate() {
            let ch = (idx % per) / plane;
            let (mean, std) = stats[ch];
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }

    /// Copies the given images into an `N x C x H x W` batch.
    pub fn batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let [c, h, w] = self.shape;
        let mut x = Array4::<f64>::zeros((indices.len(), c, h, w));
        {
            let dst = x.as_slice_mut().expect("fresh array");
            let per = c * h * w;
            for (b, &i) in indices.iter().enumerate() {
                for (d, &s) in dst[b * per..(b + 1) * per].iter_mut().zip(self.image(i)) {
                    *d = s as f64;
                }
            }
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads, subsamples and normalises both splits. Normalisation statistics
/// come from the (subsampled) training split.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Splits> {
    let (train, mut test) = match cfg.dataset {
        DatasetKind::Synthetic => synthetic_splits(cfg),
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let root = cfg.resolved_data_dir().ok_or_else(|| {
                CssError::Dataset(format!(
                    "no data_dir configured and {} is unset",
                    super::config::DATA_DIR_ENV
                ))
            })?;
            load_cifar(cfg.dataset, &root)?
        }
    };
    let mut train = train.stratified_subset(cfg.subset_fraction, cfg.seed)?;
    let stats = train.channel_stats();
    train.normalize(&stats);
    test.normalize(&stats);
    Ok(Splits { train, test })
}

fn synthetic_splits(cfg: &ExperimentConfig) -> (Dataset, Dataset) {
    let spec = &cfg.synthetic;
    let classes = cfg.model.classes;
    let shape = cfg.model.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| smooth_prototype(shape, &mut rng))
        .collect();
    let train = synthetic_blobs(&prototypes, shape, spec.train_size, spec.noise, &mut rng);
    let test = synthetic_blobs(&prototypes, shape, spec.test_size, spec.noise, &mut rng);
    (train, test)
}

/// `n` labelled images, label `i mod K`, each a class prototype plus
/// isotropic Gaussian noise.
pub fn synthetic_blobs<R: Rng>(
    prototypes: &[Vec<f32>],
    shape: [usize; 3],
    n: usize,
    noise: f64,
    rng: &mut R,
) -> Dataset {
    let per: usize = shape.iter().product();
    let mut images = Vec::with_capacity(n * per);
    let labels: Vec<usize> = (0..n).map(|i| i % prototypes.len()).collect();
    for &label in &labels {
        for &p in &prototypes[label] {
            let z: f64 = StandardNormal.sample(rng);
            images.push(p + (noise * z) as f32);
        }
    }
    Dataset::new(images, labels, shape, prototypes.len()).expect("consistent synthetic data")
}

/// White noise blurred with a 3x3 box filter, rescaled to unit variance.
fn smooth_prototype<R: Rng>(shape: [usize; 3], rng: &mut R) -> Vec<f32> {
    let [c, h, w] = shape;
    let raw: Vec<f64> = (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += raw[ch * h * w + yy as usize * w + xx as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[ch * h * w + y * w + x] = acc / cnt;
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64)
        .sqrt()
        .max(1e-8);
    out.iter().map(|v| ((v - mean) / std) as f32).collect()
}

fn locate_cifar_dir(kind: DatasetKind, root: &Path) -> PathBuf {
    let sub = match kind {
        DatasetKind::Cifar10 => "cifar-10-batches-bin",
        _ => "cifar-100-binary",
    };
    let nested = root.join(sub);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Reads CIFAR-10 (`data_batch_{1..5}.bin`, `test_batch.bin`) or CIFAR-100
/// (`train.bin`, `test.bin`, fine labels) from `root` or its standard
/// extraction subdirectory.
pub fn load_cifar(kind: DatasetKind, root: &Path) -> Result<(Dataset, Dataset)> {
    let dir = locate_cifar_dir(kind, root);
    match kind {
        DatasetKind::Cifar10 => {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for i in 1..=5 {
                read_cifar_file(
                    &dir.join(format!("data_batch_{i}.bin")),
                    1,
                    0,
                    10_000,
                    &mut images,
                    &mut labels,
                )?;
            }
            let train = Dataset::new(images, labels, [3, 32, 32], 10)?;
            let (mut images, mut labels) = (Vec::new(), Vec::new());
            read_cifar_file(
                &dir.join("test_batch.bin"),
                1,
                0,
                10_000,
                &mut images,
                &mut labels,
            )?;
            Ok((train, Dataset::new(images, labels, [3, 32, 32], 10)?))
        }
        DatasetKind::Cifar100 => {
            let (mut images, mut labels) = (Vec::new(), Vec::new());
            read_cifar_file(
                &dir.join("train.bin"),
                2,
                1,
                50_000,
                &mut images,
                &mut labels,
            )?;
            let train = Dataset::new(images, labels, [3, 32, 32], 100)?;
            let (mut images, mut labels) = (Vec::new(), Vec::new());
            read_cifar_file(
                &dir.join("test.bin"),
                2,
                1,
                10_000,
                &mut images,
                &mut labels,
            )?;
            Ok((train, Dataset::new(images, labels, [3, 32, 32], 100)?))
        }
        DatasetKind::Synthetic => Err(CssError::Dataset("synthetic data has no files".into())),
    }
}

/// Appends the records of one binary batch file, checking the record count.
pub fn read_cifar_file(
    path: &Path,
    label_bytes: usize,
    label_offset: usize,
    expected_records: usize,
    images: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| CssError::io(path, e))?;
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 || bytes.len() / record != expected_records {
        return Err(CssError::Dataset(format!(
            "{} holds {} bytes; expected {expected_records} records of {record} bytes",
            path.display(),
            bytes.len()
        )));
    }
    for chunk in bytes.chunks_exact(record) {
        labels.push(chunk[label_offset] as usize);
        images.extend(chunk[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// One training mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

/// Seeded epoch-wise shuffling with optional crop-and-flip augmentation.
/// The sequence of batches is a pure function of the seed.
pub struct Loader {
    batch_size: usize,
    augment: bool,
    rng: ChaCha8Rng,
}

impl Loader {
    pub fn new(batch_size: usize, augment: bool, seed: u64) -> Loader {
        Loader {
            batch_size,
            augment,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Batches of one pass over `data`, built lazily in order. A trailing
    /// remainder of a single image is dropped (batch statistics need two
    /// samples).
    pub fn epoch<'a>(&'a mut self, data: &'a Dataset) -> impl Iterator<Item = Batch> + 'a {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let batch_size = self.batch_size;
        let chunks: Vec<Vec<usize>> = order
            .chunks(batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect();
        chunks.into_iter().map(move |chunk| {
            let (mut images, labels) = data.batch(&chunk);
            if self.augment {
                augment_batch(&mut images, &mut self.rng);
            }
            Batch { images, labels }
        })
    }
}

/// Zero-padded random crop (padding `max(1, H / 8)`) and horizontal flip with probability 1/2.
pub fn augment_batch<R: Rng>(images: &mut Array4<f64>, rng: &mut R) {
    let (n, c, h, w) = images.dim();
    let pad = (h / 8).max(1) as i64;
    for b in 0..n {
        let dy = rng.random_range(-pad..=pad);
        let dx = rng.random_range(-pad..=pad);
        let flip = rng.random_bool(0.5);
        let src = images.index_axis(ndarray::Axis(0), b).to_owned();
        let mut dst = images.index_axis_mut(ndarray::Axis(0), b);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as i64 + dx;
                    let sy = y as i64 + dy;
                    dst[[ch, y, x]] =
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            src[[ch, sy as usize, sx as usize]]
                        } else {
                            0.0
                        };
                }
            }
        }
    }
}
