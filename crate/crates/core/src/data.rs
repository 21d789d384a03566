//! Image datasets: MNIST IDX and CIFAR-10 binary parsing, normalization,
//! augmentation, task splits, static temporal encoding, and a synthetic
//! Gaussian-blob dataset that needs no downloads.
//!
//! Parsed images hold raw pixel intensities in `[0, 1]`. Normalization is
//! applied when batches are assembled so that augmentation (which pads with
//! black pixels) operates in pixel space.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

/// Environment variable naming the data root.
pub const DATA_ROOT_ENV: &str = "STAER_DATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl DatasetKind {
    pub fn normalization(self) -> Normalization {
        match self {
            DatasetKind::Mnist => Normalization {
                mean: vec![0.1307],
                std: vec![0.3081],
            },
            DatasetKind::Cifar10 => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
            DatasetKind::Synthetic => Normalization {
                mean: vec![0.5],
                std: vec![0.25],
            },
        }
    }
}

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Normalize one `[C, H, W]` image in place.
    pub fn apply(&self, image: &mut [f32]) {
        let plane = image.len() / self.mean.len();
        for (c, chunk) in image.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub kind: DatasetKind,
    pub split: Split,
    /// `[n, C, H, W]` raw intensities in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageDataset {
    pub fn new(kind: DatasetKind, split: Split, images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.ndim() != 4 || images.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self {
            kind,
            split,
            images,
            labels,
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

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.images.row_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let n = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Self::new(
            self.kind,
            self.split,
            Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
        )
    }

    /// Concatenate datasets of the same kind and image shape.
    pub fn concat(parts: &[ImageDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dataset("nothing to concatenate".into()))?;
        if parts
            .iter()
            .any(|p| p.kind != first.kind || p.image_shape() != first.image_shape())
        {
            return Err(Error::Dataset("concatenating mismatched datasets".into()));
        }
        let images: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.images).collect();
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Self::new(first.kind, first.split, Tensor::concat_rows(&images)?, labels)
    }

    /// Normalized `[B, C, H, W]` batch; training batches are augmented when `rng` is given.
    pub fn batch(&self, indices: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let norm = self.kind.normalization();
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of {}", self.len())));
            }
            let mut img = match rng.as_deref_mut() {
                Some(r) if self.split == Split::Train => augment_pixels(self.image(i), [c, h, w], r, self.kind),
                _ => self.image(i).to_vec(),
            };
            norm.apply(&mut img);
            data.extend_from_slice(&img);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// SHA-256 over shape, pixel bits and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_u32(bytes: &[u8], at: usize, format: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| Error::Format {
            format,
            detail: format!("truncated header ({} bytes)", bytes.len()),
        })
}

/// Parse an IDX image file (`0x00000803`) and label file (`0x00000801`).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<ImageDataset> {
    const FMT: &str = "idx";
    let magic = read_u32(images, 0, FMT)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            format: "idx images",
            expected: IDX_IMAGE_MAGIC,
            actual: magic,
        });
    }
    let magic = read_u32(labels, 0, FMT)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            format: "idx labels",
            expected: IDX_LABEL_MAGIC,
            actual: magic,
        });
    }
    let n = read_u32(images, 4, FMT)? as usize;
    let rows = read_u32(images, 8, FMT)? as usize;
    let cols = read_u32(images, 12, FMT)? as usize;
    let nl = read_u32(labels, 4, FMT)? as usize;
    if n != nl {
        return Err(Error::Format {
            format: FMT,
            detail: format!("{n} images but {nl} labels"),
        });
    }
    let body = &images[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format {
            format: FMT,
            detail: format!(
                "image body has {} bytes, header implies {}",
                body.len(),
                n * rows * cols
            ),
        });
    }
    let lbody = &labels[8..];
    if lbody.len() != n {
        return Err(Error::Format {
            format: FMT,
            detail: format!("label body has {} bytes, header implies {n}", lbody.len()),
        });
    }
    let data = body.iter().map(|&p| p as f32 / 255.0).collect();
    ImageDataset::new(
        DatasetKind::Mnist,
        Split::Train,
        Tensor::new(&[n, 1, rows, cols], data)?,
        lbody.iter().map(|&l| l as usize).collect(),
    )
}

/// Serialize a single-channel dataset back to IDX image and label bytes.
pub fn write_idx(ds: &ImageDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Dataset(format!("idx holds one channel, dataset has {c}")));
    }
    let mut images = Vec::with_capacity(16 + ds.images.numel());
    for v in [IDX_IMAGE_MAGIC, ds.len() as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABEL_MAGIC, ds.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &ds.labels {
        labels.push(u8::try_from(l).map_err(|_| Error::Dataset(format!("label {l} exceeds a byte")))?);
    }
    Ok((images, labels))
}

/// Parse concatenated CIFAR-10 binary records (1 label byte + 3072 planar RGB bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<ImageDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            format: "cifar-10",
            detail: format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Format {
                format: "cifar-10",
                detail: format!("record {i} has label {}", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    ImageDataset::new(
        DatasetKind::Cifar10,
        Split::Train,
        Tensor::new(&[n, 3, 32, 32], data)?,
        labels,
    )
}

/// Data root from `STAER_DATA`, falling back to `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Dataset(format!(
            "cannot read {}: {e}; run `staer fetch-data` or point {DATA_ROOT_ENV} at a directory \
             containing mnist/ and cifar-10-batches-bin/",
            path.display()
        ))
    })
}

pub fn load_mnist(root: &Path, split: Split) -> Result<ImageDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = root.join("mnist");
    let images = read_file(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read_file(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    let mut ds = parse_idx(&images, &labels)?;
    ds.split = split;
    Ok(ds)
}

pub fn load_cifar10(root: &Path, split: Split) -> Result<ImageDataset> {
    let dir = root.join("cifar-10-batches-bin");
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(read_file(&f)?);
    }
    let mut ds = parse_cifar10(&bytes)?;
    ds.split = split;
    Ok(ds)
}

/// Horizontal flip of a `[C, H, W]` image.
pub fn hflip(image: &[f32], [c, h, w]: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * h * w);
    for row in image.chunks(w).take(c * h) {
        out.extend(row.iter().rev());
    }
    out
}

/// Zero-pad by `pad` and crop a `[C, H, W]` window whose top-left corner is `(dy, dx)`
/// in padded coordinates.
pub fn pad_crop(image: &[f32], [c, h, w]: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Training-time pixel augmentation: CIFAR-10 gets a padded random crop and a
/// random horizontal flip; other datasets are returned unchanged.
pub fn augment_pixels(image: &[f32], shape: [usize; 3], rng: &mut impl Rng, kind: DatasetKind) -> Vec<f32> {
    match kind {
        DatasetKind::Cifar10 => {
            let dy = rng.random_range(0..=8);
            let dx = rng.random_range(0..=8);
            let cropped = pad_crop(image, shape, 4, dy, dx);
            if rng.random_bool(0.5) {
                hflip(&cropped, shape)
            } else {
                cropped
            }
        }
        _ => image.to_vec(),
    }
}

/// Augment then normalize one training image.
pub fn augment(image: &[f32], shape: [usize; 3], rng: &mut impl Rng, kind: DatasetKind) -> Vec<f32> {
    let mut out = augment_pixels(image, shape, rng, kind);
    kind.normalization().apply(&mut out);
    out
}

/// Replicate a `[B, ...]` batch `steps` times along a new leading time axis.
pub fn static_encode(batch: &Tensor<f32>, steps: usize) -> Result<Tensor<f32>> {
    if steps == 0 {
        return Err(Error::invalid("time steps", "T must be >= 1"));
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(batch.shape());
    let mut data = Vec::with_capacity(batch.numel() * steps);
    for _ in 0..steps {
        data.extend_from_slice(batch.data());
    }
    Tensor::new(&shape, data)
}

/// Ordered disjoint class sets, one per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSplit {
    /// `tasks` consecutive groups of `per_task` classes in the given class order.
    pub fn sequential(order: &[usize], tasks: usize, per_task: usize) -> Result<Self> {
        if tasks == 0 || per_task == 0 || order.len() != tasks * per_task {
            return Err(Error::invalid(
                "task split",
                format!("{} classes cannot form {tasks} tasks of {per_task}", order.len()),
            ));
        }
        let split = Self {
            tasks: order.chunks(per_task).map(|c| c.to_vec()).collect(),
        };
        split.validate()?;
        Ok(split)
    }

    /// Natural order, or a permutation drawn from `seed`.
    pub fn standard(classes: usize, tasks: usize, permute: Option<u64>) -> Result<Self> {
        let mut order: Vec<usize> = (0..classes).collect();
        if let Some(seed) = permute {
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        if tasks == 0 || !classes.is_multiple_of(tasks) {
            return Err(Error::invalid(
                "task split",
                format!("{classes} classes over {tasks} tasks"),
            ));
        }
        Self::sequential(&order, tasks, classes / tasks)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            if t.is_empty() {
                return Err(Error::invalid("task split", "empty task"));
            }
            for &c in t {
                if !seen.insert(c) {
                    return Err(Error::invalid("task split", format!("class {c} in two tasks")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&class))
    }

    /// Classes of tasks `0..=task`.
    pub fn seen_classes(&self, task: usize) -> Vec<usize> {
        self.tasks[..=task].iter().flatten().copied().collect()
    }
}

/// Partition a dataset into per-task datasets, preserving sample order.
pub fn split_by_tasks(ds: &ImageDataset, split: &TaskSplit) -> Result<Vec<ImageDataset>> {
    split.validate()?;
    let mut indices = vec![Vec::new(); split.len()];
    for (i, &l) in ds.labels.iter().enumerate() {
        if let Some(t) = split.task_of(l) {
            indices[t].push(i);
        }
    }
    for t in &split.tasks {
        for &c in t {
            if !ds.labels.contains(&c) {
                return Err(Error::Dataset(format!(
                    "class {c} absent from the {:?} split",
                    ds.split
                )));
            }
        }
    }
    indices.iter().map(|idx| ds.subset(idx)).collect()
}

/// Parameters of the synthetic Gaussian-blob image dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub size: usize,
    /// Pixel noise around each class prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 100,
            test_per_class: 30,
            channels: 1,
            size: 8,
            noise: 0.2,
            seed: 7,
        }
    }
}

/// Each class is a fixed random prototype image; samples add clipped Gaussian noise.
/// Train and test draw from disjoint streams of the same prototypes.
pub fn synthetic(cfg: &SyntheticConfig, split: Split) -> Result<ImageDataset> {
    if cfg.classes == 0 || cfg.channels == 0 || cfg.size == 0 || !(cfg.noise >= 0.0) {
        return Err(Error::invalid("synthetic dataset", format!("{cfg:?}")));
    }
    let per = cfg.channels * cfg.size * cfg.size;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|_| (0..per).map(|_| proto_rng.random::<f32>()).collect())
        .collect();
    let (count, stream) = match split {
        Split::Train => (cfg.train_per_class, 1),
        Split::Test => (cfg.test_per_class, 2),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid("synthetic noise", e.to_string()))?;
    let mut data = Vec::with_capacity(count * cfg.classes * per);
    let mut labels = Vec::with_capacity(count * cfg.classes);
    for _ in 0..count {
        for (c, p) in protos.iter().enumerate() {
            data.extend(
                p.iter()
                    .map(|&v| (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
            );
            labels.push(c);
        }
    }
    ImageDataset::new(
        DatasetKind::Synthetic,
        split,
        Tensor::new(&[labels.len(), cfg.channels, cfg.size, cfg.size], data)?,
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_idx() {
        let mut img = Vec::new();
        for v in [IDX_IMAGE_MAGIC, 0, 28, 28] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        let mut lab = Vec::new();
        for v in [IDX_LABEL_MAGIC, 0] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        let ds = parse_idx(&img, &lab).unwrap();
        assert!(ds.is_empty());
        img[3] = 0x02;
        let err = parse_idx(&img, &lab).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000802"), "{err}");
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        let ds = parse_cifar10(&rec).unwrap();
        assert_eq!((ds.len(), ds.labels[0]), (1, 7));
        rec.extend(rec.clone());
        assert_eq!(parse_cifar10(&rec).unwrap().len(), 2);
        assert!(parse_cifar10(&rec[1..]).is_err());
        rec[0] = 10;
        assert!(parse_cifar10(&rec).is_err());
    }

    #[test]
    fn flip_is_involution() {
        let img: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let f = hflip(&img, [1, 3, 4]);
        assert_ne!(f, img);
        assert_eq!(hflip(&f, [1, 3, 4]), img);
        assert_eq!(pad_crop(&img, [1, 3, 4], 4, 4, 4), img);
    }

    #[test]
    fn static_encode_replicates() {
        let b = Tensor::<f32>::full(&[2, 1, 28, 28], 0.3);
        let e = static_encode(&b, 4).unwrap();
        assert_eq!(e.shape(), &[4, 2, 1, 28, 28]);
        assert_eq!(e.row(0).unwrap(), e.row(3).unwrap());
        assert_eq!(static_encode(&b, 1).unwrap().shape(), &[1, 2, 1, 28, 28]);
    }
}
