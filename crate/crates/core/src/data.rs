//! Dataset ingestion: MNIST (IDX format) and CIFAR-10 (binary batches),
//! pixel standardization, and train-time augmentation.
//!
//! Loaders are pure functions of the file bytes. Standardization statistics
//! are always computed from the train split and reused verbatim for test.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_IMAGE_MAGIC: u32 = 2051;
pub const MNIST_LABEL_MAGIC: u32 = 2049;
const CIFAR_RECORD: usize = 3073; // 1 label byte + 3*32*32 pixels

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    /// N,C,H,W in the unit interval at load time, standardized afterwards.
    pub images: Tensor,
    pub labels: Vec<u32>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    /// Per-channel mean/std of the raw train pixels, applied to both splits.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPolicy {
    pub pad: usize,
    pub crop: usize,
    pub hflip: bool,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            pad: 0,
            crop: 0,
            hflip: false,
        }
    }

    pub fn cifar() -> Self {
        AugmentPolicy {
            pad: 4,
            crop: 32,
            hflip: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.pad == 0 && !self.hflip
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated(format!("{}: header", path.display())));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn mnist_file(dir: &Path, candidates: &[&str]) -> PathBuf {
    for c in candidates {
        let p = dir.join(c);
        if p.exists() {
            return p;
        }
    }
    dir.join(candidates[0])
}

fn load_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: MNIST_IMAGE_MAGIC.to_string(),
            got: magic.to_string(),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!(
            "{}: {} bytes, need {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[16..expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

fn load_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MNIST_LABEL_MAGIC.to_string(),
            got: magic.to_string(),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Truncated(format!("{}: labels", path.display())));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as u32).collect())
}

/// Load MNIST from a directory holding the four IDX files (standard names,
/// with or without the `.idx3-ubyte`-style suffixes).
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let train_images = load_idx_images(&mnist_file(
        dir,
        &["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
    ))?;
    let train_labels = load_idx_labels(&mnist_file(
        dir,
        &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
    ))?;
    let test_images = load_idx_images(&mnist_file(
        dir,
        &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
    ))?;
    let test_labels = load_idx_labels(&mnist_file(
        dir,
        &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
    ))?;
    build_dataset(train_images, train_labels, test_images, test_labels, 10)
}

fn load_cifar_batch(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<u32>) -> Result<()> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Truncated(format!(
            "{}: {} bytes is not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(record[0] as u32);
        images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Load CIFAR-10 from a directory holding data_batch_1..5.bin and
/// test_batch.bin (directly or under cifar-10-batches-bin/).
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let base = if dir.join("data_batch_1.bin").exists() {
        dir.to_path_buf()
    } else {
        dir.join("cifar-10-batches-bin")
    };
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        load_cifar_batch(
            &base.join(format!("data_batch_{i}.bin")),
            &mut train_pixels,
            &mut train_labels,
        )?;
    }
    let mut test_pixels = Vec::new();
    let mut test_labels = Vec::new();
    load_cifar_batch(&base.join("test_batch.bin"), &mut test_pixels, &mut test_labels)?;
    let train_images = Tensor::new(vec![train_labels.len(), 3, 32, 32], train_pixels)?;
    let test_images = Tensor::new(vec![test_labels.len(), 3, 32, 32], test_pixels)?;
    build_dataset(train_images, train_labels, test_images, test_labels, 10)
}

fn build_dataset(
    mut train_images: Tensor,
    train_labels: Vec<u32>,
    mut test_images: Tensor,
    test_labels: Vec<u32>,
    num_classes: usize,
) -> Result<Dataset> {
    if train_images.shape()[0] != train_labels.len()
        || test_images.shape()[0] != test_labels.len()
    {
        return Err(Error::ShapeMismatch("image/label count mismatch".into()));
    }
    let (mean, std) = channel_stats(&train_images)?;
    standardize(&mut train_images, &mean, &std)?;
    standardize(&mut test_images, &mean, &std)?;
    Ok(Dataset {
        train: DatasetSplit {
            images: train_images,
            labels: train_labels,
        },
        test: DatasetSplit {
            images: test_images,
            labels: test_labels,
        },
        mean,
        std,
        num_classes,
    })
}

/// Per-channel mean and standard deviation over every pixel of a split.
pub fn channel_stats(images: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let s = images.nchw()?;
    let mut mean = vec![0.0f64; s.c];
    let mut sq = vec![0.0f64; s.c];
    let plane = s.h * s.w;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            for &v in &images.data()[base..base + plane] {
                mean[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
    }
    let count = (s.n * plane) as f64;
    let mut std = vec![0.0f32; s.c];
    let mut out_mean = vec![0.0f32; s.c];
    for c in 0..s.c {
        let m = mean[c] / count;
        out_mean[c] = m as f32;
        std[c] = ((sq[c] / count - m * m).max(1e-12)).sqrt() as f32;
    }
    Ok((out_mean, std))
}

pub fn standardize(images: &mut Tensor, mean: &[f32], std: &[f32]) -> Result<()> {
    let s = images.nchw()?;
    if mean.len() != s.c || std.len() != s.c {
        return Err(Error::ShapeMismatch(format!(
            "{} stats for {} channels",
            mean.len(),
            s.c
        )));
    }
    let plane = s.h * s.w;
    let data = images.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, sd) = (mean[c], std[c]);
            let base = (n * s.c + c) * plane;
            for v in &mut data[base..base + plane] {
                *v = (*v - m) / sd;
            }
        }
    }
    Ok(())
}

/// Pad-then-random-crop and optional horizontal flip. The eval path simply
/// does not call this. Padding is zero-valued (post-standardization zeros).
pub fn augment(batch: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    if policy.is_identity() {
        return Ok(batch.clone());
    }
    let s = batch.nchw()?;
    let crop = if policy.pad > 0 { policy.crop } else { s.h };
    if policy.pad > 0 && crop > s.h + 2 * policy.pad {
        return Err(Error::InvalidConfig(format!(
            "crop {crop} exceeds padded extent {}",
            s.h + 2 * policy.pad
        )));
    }
    let (oh, ow) = if policy.pad > 0 { (crop, crop) } else { (s.h, s.w) };
    let mut out = vec![0.0f32; s.n * s.c * oh * ow];
    let max_off = s.h + 2 * policy.pad - oh;
    for n in 0..s.n {
        let (dy, dx) = if policy.pad > 0 {
            (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off))
        } else {
            (0, 0)
        };
        let flip = policy.hflip && rng.gen_bool(0.5);
        for c in 0..s.c {
            let src_plane = &batch.data()[(n * s.c + c) * s.h * s.w..];
            for y in 0..oh {
                for x in 0..ow {
                    let sy = (y + dy) as isize - policy.pad as isize;
                    let sx_logical = (x + dx) as isize - policy.pad as isize;
                    let sx = if flip {
                        s.w as isize - 1 - sx_logical
                    } else {
                        sx_logical
                    };
                    let v = if sy >= 0 && sy < s.h as isize && sx >= 0 && sx < s.w as isize {
                        src_plane[sy as usize * s.w + sx as usize]
                    } else {
                        0.0
                    };
                    out[((n * s.c + c) * oh + y) * ow + x] = v;
                }
            }
        }
    }
    Tensor::new(vec![s.n, s.c, oh, ow], out)
}
