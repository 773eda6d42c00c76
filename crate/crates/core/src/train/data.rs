//! MNIST (IDX) and CIFAR-10 (binary record) loaders.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images as one contiguous `N × C × H × W` float buffer plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-sample shape `[C, H, W]`.
    pub sample_shape: Vec<usize>,
    pub images: Vec<f32>,
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

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Copy the samples at `indices` into a batch buffer and label list.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let s = self.sample_len();
        let mut x = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            x.extend_from_slice(&self.images[i * s..(i + 1) * s]);
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Keep the rows at `indices`, in that order.
    fn select(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            sample_shape: self.sample_shape.clone(),
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), format!("file ends before the header field at byte {at}")))
}

fn check_len(bytes: &[u8], want: usize, path: &Path) -> Result<()> {
    if bytes.len() < want {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: header promises {want} bytes, file has {}", bytes.len()),
        ));
    }
    Ok(())
}

/// Parse an IDX image file (`0x00000803`, count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(format_err(path, 0, format!("bad image magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    check_len(bytes, 16 + n * rows * cols, path)?;
    Ok((n, rows, cols, bytes[16..16 + n * rows * cols].to_vec()))
}

/// Parse an IDX label file (`0x00000801`, count, labels).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(format_err(path, 0, format!("bad label magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    check_len(bytes, 8 + n, path)?;
    let labels = bytes[8..8 + n].to_vec();
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(format_err(path, 8 + i, format!("label {} outside [0, 9]", labels[i])));
    }
    Ok(labels)
}

/// File names of an MNIST split inside `dir`.
pub fn mnist_files(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img_path, lbl_path) = mnist_files(dir, split);
    let (n, rows, cols, pixels) = parse_idx_images(&read(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(format_err(&lbl_path, 4, format!("{} labels for {n} images", labels.len())));
    }
    Ok(Dataset {
        sample_shape: vec![1, rows, cols],
        images: pixels.iter().map(|&p| f32::from(p) / 255.0).collect(),
        labels: labels.into_iter().map(usize::from).collect(),
        num_classes: 10,
    })
}

/// File names of a CIFAR-10 split inside `dir`.
pub fn cifar_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Parse CIFAR-10 records: one label byte then 3072 CHW pixel bytes.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
    if whole != bytes.len() || bytes.is_empty() {
        return Err(format_err(
            path,
            whole,
            format!("{} bytes is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    let mut pixels = Vec::with_capacity(labels.capacity() * CIFAR_PIXELS);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if usize::from(rec[0]) >= CIFAR_CLASSES {
            return Err(format_err(path, r * CIFAR_RECORD_BYTES, format!("label {} outside [0, 9]", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn load_cifar_raw(dir: &Path, split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut images = Vec::new();
    for path in cifar_files(dir, split) {
        let (l, p) = parse_cifar_records(&read(&path)?, &path)?;
        labels.extend(l.into_iter().map(usize::from));
        images.extend(p.into_iter().map(|b| f32::from(b) / 255.0));
    }
    Ok(Dataset {
        sample_shape: vec![3, 32, 32],
        images,
        labels,
        num_classes: CIFAR_CLASSES,
    })
}

/// Per-channel mean and standard deviation over a dataset.
pub fn channel_stats(ds: &Dataset) -> Vec<(f64, f64)> {
    let c = ds.sample_shape[0];
    let plane: usize = ds.sample_shape[1..].iter().product();
    let mut sums = vec![(0.0f64, 0.0f64); c];
    for sample in ds.images.chunks_exact(c * plane) {
        for (ch, values) in sample.chunks_exact(plane).enumerate() {
            for &v in values {
                sums[ch].0 += f64::from(v);
                sums[ch].1 += f64::from(v) * f64::from(v);
            }
        }
    }
    let count = (ds.len() * plane) as f64;
    sums.into_iter()
        .map(|(s, sq)| {
            let mean = s / count;
            (mean, (sq / count - mean * mean).max(0.0).sqrt())
        })
        .collect()
}

fn standardize(ds: &mut Dataset, stats: &[(f64, f64)]) {
    let plane: usize = ds.sample_shape[1..].iter().product();
    let c = ds.sample_shape[0];
    for sample in ds.images.chunks_exact_mut(c * plane) {
        for (values, &(mean, std)) in sample.chunks_exact_mut(plane).zip(stats) {
            let inv = if std > 0.0 { 1.0 / std } else { 1.0 };
            for v in values {
                *v = ((f64::from(*v) - mean) * inv) as f32;
            }
        }
    }
}

/// Indices of a class-stratified prefix: the first `round(fraction · N / K)`
/// samples of every class, in file order. A fraction of 1 keeps everything.
pub fn stratified_prefix(labels: &[usize], num_classes: usize, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset_fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let quota = (fraction * labels.len() as f64 / num_classes as f64).round() as usize;
    let mut taken = vec![0usize; num_classes];
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(_, &l)| {
            let keep = taken[l] < quota;
            taken[l] += usize::from(keep);
            keep
        })
        .map(|(i, _)| i)
        .collect())
}

/// Load the train and test splits. The class-stratified subset applies to
/// the training split only. CIFAR-10 is standardized per channel with
/// statistics of the (subset) training split; MNIST is scaled to [0, 1].
pub fn load_splits(name: DatasetName, dir: &Path, subset_fraction: f64) -> Result<(Dataset, Dataset)> {
    let (train, test) = match name {
        DatasetName::Mnist => (load_mnist(dir, Split::Train)?, load_mnist(dir, Split::Test)?),
        DatasetName::Cifar10 => (load_cifar_raw(dir, Split::Train)?, load_cifar_raw(dir, Split::Test)?),
    };
    let keep = stratified_prefix(&train.labels, train.num_classes, subset_fraction)?;
    let mut train = if keep.len() == train.len() { train } else { train.select(&keep) };
    let mut test = test;
    if name == DatasetName::Cifar10 {
        let stats = channel_stats(&train);
        standardize(&mut train, &stats);
        standardize(&mut test, &stats);
    }
    Ok((train, test))
}

/// Load one split. The subset fraction applies to the training split.
pub fn load_dataset(name: DatasetName, dir: &Path, split: Split, subset_fraction: f64) -> Result<Dataset> {
    match (name, split) {
        (DatasetName::Mnist, Split::Train) => {
            let ds = load_mnist(dir, split)?;
            let keep = stratified_prefix(&ds.labels, ds.num_classes, subset_fraction)?;
            Ok(if keep.len() == ds.len() { ds } else { ds.select(&keep) })
        }
        (DatasetName::Mnist, Split::Test) => load_mnist(dir, split),
        (DatasetName::Cifar10, Split::Train) => Ok(load_splits(name, dir, subset_fraction)?.0),
        (DatasetName::Cifar10, Split::Test) => Ok(load_splits(name, dir, subset_fraction)?.1),
    }
}
