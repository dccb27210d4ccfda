//! Dataset ingestion, seeded splits and crop/flip augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{substream, tags, StreamRng};

pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: length {len} is not a multiple of {record}")]
    RecordLength { path: PathBuf, len: usize, record: usize },

    #[error("{path}: record {record} has label {label} outside 0..{classes}")]
    LabelRange { path: PathBuf, record: usize, label: u8, classes: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Images in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N×C×H×W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("images {:?} for {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index { index: bad, len: num_classes });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// Rows `range` in their stored order.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let idx: Vec<usize> = (start.min(end)..end).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        }
        .into());
    }
    Ok(())
}

/// Parses a big-endian IDX image/label file pair. Pixels are scaled by 1/255.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read(ip)?;
    need(ip, &img, 16)?;
    let magic = be_u32(&img, 0);
    if magic != MNIST_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: ip.to_path_buf(),
            expected: MNIST_IMAGES_MAGIC,
            found: magic,
        }
        .into());
    }
    let (n, rows, cols) = (be_u32(&img, 4) as usize, be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    need(ip, &img, 16 + n * rows * cols)?;

    let lab = read(lp)?;
    need(lp, &lab, 8)?;
    let magic = be_u32(&lab, 0);
    if magic != MNIST_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: lp.to_path_buf(),
            expected: MNIST_LABELS_MAGIC,
            found: magic,
        }
        .into());
    }
    let nl = be_u32(&lab, 4) as usize;
    if nl != n {
        return Err(DataError::CountMismatch { images: n, labels: nl }.into());
    }
    need(lp, &lab, 8 + n)?;

    let mut labels = Vec::with_capacity(n);
    for (i, &b) in lab[8..8 + n].iter().enumerate() {
        if b > 9 {
            return Err(DataError::LabelRange {
                path: lp.to_path_buf(),
                record: i,
                label: b,
                classes: 10,
            }
            .into());
        }
        labels.push(b as usize);
    }
    let data = img[16..16 + n * rows * cols].iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, 10, "mnist")
}

/// Writes an IDX image/label pair. Pixels are rounded from `[0,1]` to bytes.
pub fn write_mnist_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [_, rows, cols] = ds.image_shape();
    let n = ds.len();
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [MNIST_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|v| to_byte(*v)));
    let mut lab = Vec::with_capacity(8 + n);
    for v in [MNIST_LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&y| y as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses CIFAR-10 binary batches: 1 label byte + 3072 channel-major bytes per record.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = read(p)?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(DataError::RecordLength {
                path: p.to_path_buf(),
                len: bytes.len(),
                record: CIFAR_RECORD_LEN,
            }
            .into());
        }
        for (i, rec) in bytes.chunks(CIFAR_RECORD_LEN).enumerate() {
            if rec[0] > 9 {
                return Err(DataError::LabelRange {
                    path: p.to_path_buf(),
                    record: i,
                    label: rec[0],
                    classes: 10,
                }
                .into());
            }
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10, "cifar10")
}

pub fn write_cifar10_bin(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if ds.image_shape() != [3, 32, 32] {
        return Err(Error::dim("write_cifar10_bin", format!("image shape {:?}", ds.image_shape())));
    }
    let stride = ds.images.stride0();
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_LEN);
    for (i, &y) in ds.labels.iter().enumerate() {
        out.push(y as u8);
        out.extend(ds.images.data()[i * stride..(i + 1) * stride].iter().map(|v| to_byte(*v)));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Noise level of [`synth_blobs`].
pub const BLOB_SIGMA: f64 = 0.1;

/// Gaussian blobs around per-class random templates, clamped to `[0,1]`.
/// Rows are ordered class-major.
pub fn synth_blobs(seed: u64, num_classes: usize, n_per_class: usize, shape: [usize; 3]) -> Result<Dataset> {
    let dim: usize = shape.iter().product();
    let mut data = Vec::with_capacity(num_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for c in 0..num_classes {
        let mut trng = substream(seed, tags::BLOBS, 2 * c as u64);
        let template: Vec<f64> = (0..dim).map(|_| trng.random::<f64>()).collect();
        let mut nrng = substream(seed, tags::BLOBS, 2 * c as u64 + 1);
        for _ in 0..n_per_class {
            data.extend(template.iter().map(|t| {
                let z: f64 = nrng.sample(StandardNormal);
                (t + BLOB_SIGMA * z).clamp(0.0, 1.0)
            }));
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?,
        labels,
        num_classes,
        "blobs",
    )
}

/// Stratified, seeded split into `(train, validation)`. Each class contributes
/// `round(count·val_fraction)` examples to validation; both parts keep the
/// original row order.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(ds, val_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

pub fn split_indices(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Parameter(format!("val_fraction must be in (0,1), got {val_fraction}")));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut is_val = vec![false; ds.len()];
    for (c, idx) in per_class.iter_mut().enumerate() {
        let mut rng = substream(seed, tags::SPLIT, c as u64);
        idx.shuffle(&mut rng);
        let take = (idx.len() as f64 * val_fraction).round() as usize;
        for &i in &idx[..take] {
            is_val[i] = true;
        }
    }
    let train = (0..ds.len()).filter(|&i| !is_val[i]).collect();
    let val = (0..ds.len()).filter(|&i| is_val[i]).collect();
    Ok((train, val))
}

/// Crop offset and flip decision for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

/// Applies a zero-padded crop at `(dy, dx)` and an optional horizontal flip
/// to one `C×H×W` image.
pub fn crop_flip(image: &[f64], shape: [usize; 3], pad: usize, cf: CropFlip) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + cf.dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let src_x = if cf.flip { w - 1 - x } else { x };
                let sx = (src_x + cf.dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Random crop with `pad`-pixel zero padding and horizontal flip with
/// probability `flip_prob`. Three draws per image, in order: dy, dx, flip.
pub fn augment(batch: &Tensor, pad: usize, flip_prob: f64, rng: &mut StreamRng) -> Tensor {
    let s = batch.shape();
    let shape = [s[1], s[2], s[3]];
    let stride = batch.stride0();
    let mut data = Vec::with_capacity(batch.len());
    for img in batch.data().chunks(stride) {
        let cf = CropFlip {
            dy: rng.random_range(0..=2 * pad),
            dx: rng.random_range(0..=2 * pad),
            flip: rng.random::<f64>() < flip_prob,
        };
        data.extend(crop_flip(img, shape, pad, cf));
    }
    Tensor::new(s.to_vec(), data).expect("same shape")
}
