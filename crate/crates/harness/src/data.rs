//! Synthetic and on-disk datasets. Every sample carries its input and a
//! one-hot (or binary mask) label of matching class layout.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bgdb_core::rng::{self, StreamRng};
use bgdb_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::CrossValidation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    TwoMoons { n: usize, noise: f64 },
    Blobs { n: usize, centers: usize, std: f64 },
    CheckerboardSeg { n: usize, size: usize, cells: usize, noise: f64 },
    ImageDir { images: PathBuf, masks: PathBuf, size: usize },
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DatasetConfig::TwoMoons { n, noise } if n < 2 || noise < 0.0 => bail!("two_moons needs n >= 2, noise >= 0"),
            DatasetConfig::Blobs { n, centers, std } if n < 2 || centers < 2 || std < 0.0 => {
                bail!("blobs needs n >= 2, centers >= 2, std >= 0")
            }
            DatasetConfig::CheckerboardSeg { n, size, cells, noise } => check_board(n, size, cells, noise),
            DatasetConfig::ImageDir { size, .. } if !size.is_power_of_two() => bail!("image size {size} is not a power of 2"),
            _ => Ok(()),
        }
    }

    /// Generates (or loads) the full dataset; synthetic sets are fixed by `seed`.
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        match self {
            DatasetConfig::TwoMoons { n, noise } => Ok(gen_two_moons(*n, *noise, seed)),
            DatasetConfig::Blobs { n, centers, std } => Ok(gen_blobs(*n, *centers, *std, seed)),
            DatasetConfig::CheckerboardSeg { n, size, cells, noise } => gen_checkerboard_seg(*n, *size, *cells, *noise, seed),
            DatasetConfig::ImageDir { images, masks, size } => load_image_dir(images, masks, *size),
        }
    }
}

fn check_board(n: usize, size: usize, cells: usize, noise: f64) -> Result<()> {
    if n < 1 || !size.is_power_of_two() || cells < 2 || cells % 2 != 0 || size % cells != 0 || noise < 0.0 {
        bail!("checkerboard needs n >= 1, size a power of 2 and an even cell count dividing it (size {size}, cells {cells})");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    pub input_shape: Vec<usize>,
    pub label_shape: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stacks the samples at `indices` into `(inputs, labels)` batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let stack = |rows: &[Vec<f64>], shape: &[usize]| {
            let data = indices.iter().flat_map(|&i| rows[i].iter().copied()).collect();
            let mut full = vec![indices.len()];
            full.extend_from_slice(shape);
            Tensor::new(data, &full)
        };
        Ok((stack(&self.inputs, &self.input_shape)?, stack(&self.labels, &self.label_shape)?))
    }

    /// Seeded shuffle split into `(train, test)` index sets.
    pub fn split(&self, test_fraction: f64, cv: Option<CrossValidation>, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, 7));
        match cv {
            Some(CrossValidation { k, fold }) => {
                let (lo, hi) = (fold * self.len() / k, (fold + 1) * self.len() / k);
                let test = order[lo..hi].to_vec();
                let train = order[..lo].iter().chain(&order[hi..]).copied().collect();
                (train, test)
            }
            None => {
                let n_test = ((self.len() as f64 * test_fraction).round() as usize).clamp(1, self.len() - 1);
                (order[n_test..].to_vec(), order[..n_test].to_vec())
            }
        }
    }
}

fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    (0..classes).map(|c| f64::from(c == class)).collect()
}

fn normal(r: &mut StreamRng) -> f64 {
    r.sample(StandardNormal)
}

/// Two interleaved half circles, alternating labels; `noise` is the
/// standard deviation of isotropic Gaussian jitter.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, 0);
    let per_moon = [n.div_ceil(2), n / 2];
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in per_moon.iter().enumerate() {
        for i in 0..count {
            let theta = if count > 1 { PI * i as f64 / (count - 1) as f64 } else { 0.0 };
            let (x, y) = if class == 0 {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            inputs.push(vec![x + noise * normal(&mut r), y + noise * normal(&mut r)]);
            labels.push(one_hot(class, 2));
        }
    }
    Dataset { inputs, labels, input_shape: vec![2], label_shape: vec![2] }
}

/// Isotropic Gaussian clusters around seeded centres in `[-5, 5]^2`,
/// assigned round-robin.
pub fn gen_blobs(n: usize, centers: usize, std: f64, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, 0);
    let means: Vec<[f64; 2]> = (0..centers).map(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]).collect();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers;
        inputs.push(vec![means[c][0] + std * normal(&mut r), means[c][1] + std * normal(&mut r)]);
        labels.push(one_hot(c, centers));
    }
    Dataset { inputs, labels, input_shape: vec![2], label_shape: vec![centers] }
}

/// Binary checkerboards with `cells` squares per side, cyclically shifted by
/// a random offset. Images are `0.2 + 0.6 * mask` plus Gaussian noise.
pub fn gen_checkerboard_seg(n: usize, size: usize, cells: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_board(n, size, cells, noise)?;
    let mut r = rng::stream(seed, 0);
    let cell = size / cells;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (dy, dx) = (r.random_range(0..size), r.random_range(0..size));
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (yy, xx) = ((y + dy) % size, (x + dx) % size);
                mask.push(f64::from((yy / cell + xx / cell) % 2 == 1));
            }
        }
        let image = mask.iter().map(|m| 0.2 + 0.6 * m + noise * normal(&mut r)).collect();
        inputs.push(image);
        labels.push(mask);
    }
    Ok(Dataset { inputs, labels, input_shape: vec![1, size, size], label_shape: vec![1, size, size] })
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn read_gray(path: &Path, size: u32, filter: image::imageops::FilterType) -> Result<Vec<f64>> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let gray = image::imageops::resize(&img.to_luma8(), size, size, filter);
    Ok(gray.pixels().map(|p| f64::from(p.0[0])).collect())
}

/// Image/mask pairs matched by file stem. Images become grayscale in
/// `[0, 1]`; masks are binarised at 128. Both are resized to `size`.
pub fn load_image_dir(images: &Path, masks: &Path, size: usize) -> Result<Dataset> {
    let (img_stems, mask_stems) = (stems(images)?, stems(masks)?);
    if img_stems.is_empty() {
        bail!("no images in {}", images.display());
    }
    let unmatched: Vec<&String> = img_stems
        .keys()
        .filter(|s| !mask_stems.contains_key(*s))
        .chain(mask_stems.keys().filter(|s| !img_stems.contains_key(*s)))
        .collect();
    if !unmatched.is_empty() {
        bail!("unpaired files: {unmatched:?}");
    }
    let side = u32::try_from(size)?;
    let mut inputs = Vec::with_capacity(img_stems.len());
    let mut labels = Vec::with_capacity(img_stems.len());
    for (stem, img_path) in &img_stems {
        let image = read_gray(img_path, side, image::imageops::FilterType::Triangle)?;
        let mask = read_gray(&mask_stems[stem], side, image::imageops::FilterType::Nearest)?;
        inputs.push(image.into_iter().map(|v| v / 255.0).collect());
        labels.push(mask.into_iter().map(|v| f64::from(v >= 128.0)).collect());
    }
    Ok(Dataset { inputs, labels, input_shape: vec![1, size, size], label_shape: vec![1, size, size] })
}
