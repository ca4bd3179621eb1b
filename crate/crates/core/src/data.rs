//! MNIST IDX and CIFAR binary loaders, plus seeded mini-batching.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use avic_tensor::Tensor;
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MNIST_IMAGES_MAGIC: u32 = 2051;
pub const MNIST_LABELS_MAGIC: u32 = 2049;
pub const CIFAR10_RECORD: usize = 1 + 3072;
pub const CIFAR100_RECORD: usize = 2 + 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Cifar10,
    Cifar100,
}

impl DatasetId {
    pub fn classes(self) -> usize {
        match self {
            DatasetId::Mnist | DatasetId::Cifar10 => 10,
            DatasetId::Cifar100 => 100,
        }
    }

    /// `(channels, height, width)`.
    pub fn image_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetId::Mnist => (1, 28, 28),
            DatasetId::Cifar10 | DatasetId::Cifar100 => (3, 32, 32),
        }
    }

    pub fn default_latent_dim(self) -> usize {
        match self {
            DatasetId::Mnist => 16,
            DatasetId::Cifar10 | DatasetId::Cifar100 => 64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            "cifar100" => Ok(DatasetId::Cifar100),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }
}

/// Images in `[0, 1]`, NCHW, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub name: String,
    pub classes: usize,
}

impl DatasetSplit {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, name: impl Into<String>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "images must be NCHW, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                path: PathBuf::new(),
                label: l,
                classes,
            });
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` records (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        Ok(Self {
            images: self.images.slice_rows(0, n)?,
            labels: self.labels[..n].to_vec(),
            name: self.name.clone(),
            classes: self.classes,
        })
    }

    pub fn gather(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            indices: rows.to_vec(),
        })
    }

    /// Consecutive, unshuffled batches for evaluation.
    pub fn sequential_batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size).map(|c| self.gather(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Source rows in the split.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch's shuffled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub epoch: u64,
    pub batch_size: usize,
    pub order: Vec<usize>,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cannot batch an empty split".into()));
        }
        Ok(Self {
            seed,
            epoch,
            batch_size,
            order: rng::permutation(n, seed, epoch),
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn batch_indices(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }
}

/// Shuffled batches for `(seed, epoch)`; the last batch may be partial.
/// Batches larger than the split collapse into a single batch.
pub fn make_batches(split: &DatasetSplit, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    let plan = BatchPlan::new(split.len(), batch_size, seed, epoch)?;
    plan.batch_indices().map(|rows| split.gather(rows)).collect()
}

/// Reads a file, transparently inflating gzip content (magic `1f 8b`).
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: "header".into(),
        })
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<(usize, usize, usize, Vec<f32>)> {
    idx_header(bytes, path, MNIST_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} bytes, header promises {need}", bytes.len()),
        });
    }
    let n = limit.map_or(count, |l| l.min(count));
    let pixels = bytes[16..16 + n * rows * cols]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<Vec<usize>> {
    idx_header(bytes, path, MNIST_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} bytes, header promises {}", bytes.len(), 8 + count),
        });
    }
    let n = limit.map_or(count, |l| l.min(count));
    let labels: Vec<usize> = bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    if let Some(&l) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::LabelOutOfRange {
            path: path.to_path_buf(),
            label: l,
            classes: 10,
        });
    }
    Ok(labels)
}

/// Loads an MNIST image/label IDX pair (raw or gzip). `limit` keeps the
/// first records only.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<DatasetSplit> {
    let image_bytes = read_maybe_gzip(images_path)?;
    let label_bytes = read_maybe_gzip(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes, images_path, None)?;
    let labels = parse_idx_labels(&label_bytes, labels_path, None)?;
    if n != labels.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let keep = limit.map_or(n, |l| l.min(n));
    let pixels = pixels[..keep * rows * cols].to_vec();
    let images = Tensor::new(vec![keep, 1, rows, cols], pixels)?;
    let name = images_path
        .file_name()
        .map_or_else(|| "mnist".to_string(), |f| f.to_string_lossy().into_owned());
    DatasetSplit::new(images, labels[..keep].to_vec(), name, 10)
}

/// Loads CIFAR binary batch files in order. `variant` is 10 or 100; for
/// CIFAR-100 the fine label is used.
pub fn load_cifar_binary(paths: &[PathBuf], variant: usize, limit: Option<usize>) -> Result<DatasetSplit> {
    let (record, classes, label_at) = match variant {
        10 => (CIFAR10_RECORD, 10, 0),
        100 => (CIFAR100_RECORD, 100, 1),
        v => {
            return Err(Error::InvalidArgument(format!(
                "CIFAR variant must be 10 or 100, got {v}"
            )))
        }
    };
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let cap = limit.unwrap_or(usize::MAX);
    for path in paths {
        let bytes = read_maybe_gzip(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::RecordSize {
                path: path.clone(),
                len: bytes.len(),
                record,
            });
        }
        for rec in bytes.chunks(record) {
            if labels.len() == cap {
                break;
            }
            let label = rec[label_at] as usize;
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    path: path.clone(),
                    label,
                    classes,
                });
            }
            labels.push(label);
            pixels.extend(rec[record - 3072..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    DatasetSplit::new(images, labels, format!("cifar{variant}"), classes)
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names
        .iter()
        .flat_map(|n| [dir.join(n), dir.join(format!("{n}.gz"))])
        .find(|p| p.is_file())
}

fn find_in(dirs: &[PathBuf], names: &[&str]) -> Option<PathBuf> {
    dirs.iter().find_map(|d| first_existing(d, names))
}

/// Locates and loads the train and test splits of `dataset` under `root`.
///
/// MNIST is searched in `root` and `root/mnist` under both the official
/// (`train-images-idx3-ubyte`) and dotted (`train-images.idx3-ubyte`)
/// names, with optional `.gz`. CIFAR-10 uses `data_batch_{1..5}.bin` and
/// `test_batch.bin` in `root` or `root/cifar-10-batches-bin`; CIFAR-100
/// uses `train.bin` and `test.bin` in `root` or `root/cifar-100-binary`.
pub fn load_dataset(
    dataset: DatasetId,
    root: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let missing = |what: &str| Error::MissingDataset(format!("{what} under {}", root.display()));
    match dataset {
        DatasetId::Mnist => {
            let dirs = [root.to_path_buf(), root.join("mnist")];
            let get = |stem: &str, kind: &str| {
                let a = format!("{stem}-{kind}-ubyte");
                let b = format!("{stem}.{kind}-ubyte");
                let c = format!("{stem}-{kind}.ubyte");
                find_in(&dirs, &[&a, &b, &c]).ok_or_else(|| missing(&a))
            };
            let train = load_mnist_idx(
                &get("train-images", "idx3")?,
                &get("train-labels", "idx1")?,
                train_limit,
            )?;
            let test = load_mnist_idx(&get("t10k-images", "idx3")?, &get("t10k-labels", "idx1")?, test_limit)?;
            Ok((train, test))
        }
        DatasetId::Cifar10 => {
            let dirs = [root.to_path_buf(), root.join("cifar-10-batches-bin")];
            let train: Vec<PathBuf> = (1..=5)
                .map(|i| {
                    let name = format!("data_batch_{i}.bin");
                    find_in(&dirs, &[&name]).ok_or_else(|| missing(&name))
                })
                .collect::<Result<_>>()?;
            let test = find_in(&dirs, &["test_batch.bin"]).ok_or_else(|| missing("test_batch.bin"))?;
            Ok((
                load_cifar_binary(&train, 10, train_limit)?,
                load_cifar_binary(&[test], 10, test_limit)?,
            ))
        }
        DatasetId::Cifar100 => {
            let dirs = [root.to_path_buf(), root.join("cifar-100-binary")];
            let train = find_in(&dirs, &["train.bin"]).ok_or_else(|| missing("train.bin"))?;
            let test = find_in(&dirs, &["test.bin"]).ok_or_else(|| missing("test.bin"))?;
            Ok((
                load_cifar_binary(&[train], 100, train_limit)?,
                load_cifar_binary(&[test], 100, test_limit)?,
            ))
        }
    }
}
