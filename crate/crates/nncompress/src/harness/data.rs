//! Dataset ingestion: IDX (MNIST-style) and CIFAR-10 binary readers, plus a
//! deterministic synthetic-blob generator for fast experiments.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_BYTES: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labelled image collection. Images are `(count, channels, h, w)` scaled to
/// `[0, 1]`; labels are class indices below `num_classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u32>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u32>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!(
                "images must be (count, channels, h, w), got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copy the listed examples into a `(k, c, h, w)` batch tensor.
    pub fn gather_images(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.images.shape();
        let example = s[1] * s[2] * s[3];
        let mut out = vec![0.0; indices.len() * example];
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Parameter(format!(
                    "example index {i} out of range for {} examples",
                    self.len()
                )));
            }
            out[row * example..(row + 1) * example]
                .copy_from_slice(&self.images.data()[i * example..(i + 1) * example]);
        }
        Tensor::new(&[indices.len(), s[1], s[2], s[3]], out)
    }

    /// First `n` examples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Parameter("cannot take 0 examples".into()));
        }
        let s = self.images.shape();
        let example = s[1] * s[2] * s[3];
        let images = Tensor::new(
            &[n, s[1], s[2], s[3]],
            self.images.data()[..n * example].to_vec(),
        )?;
        Dataset::new(images, self.labels[..n].to_vec(), self.num_classes, self.split)
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Parse an IDX image/label file pair (the MNIST container format):
/// big-endian magic and dimension sizes, unsigned-byte pixels scaled by
/// 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = read_u32_be(&mut ir)? as usize;
    let rows = read_u32_be(&mut ir)? as usize;
    let cols = read_u32_be(&mut ir)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    ir.read_exact(&mut pixels)?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lr)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let label_count = read_u32_be(&mut lr)? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut raw_labels = vec![0u8; label_count];
    lr.read_exact(&mut raw_labels)?;

    let images = Tensor::new(
        &[count, 1, rows, cols],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let labels: Vec<u32> = raw_labels.iter().map(|&l| l as u32).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m as usize + 1);
    Dataset::new(images, labels, num_classes, split)
}

/// Parse a CIFAR-10 binary batch: 3073-byte records of one label byte
/// followed by 3072 channel-major (R, G, B) pixel bytes.
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "{}: size {} is not a multiple of {CIFAR_RECORD_BYTES}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * 3072);
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(record[0] as u32);
        pixels.extend(record[1..].iter().map(|&p| p as f64 / 255.0));
    }
    let images = Tensor::new(&[count, 3, 32, 32], pixels)?;
    let num_classes = labels.iter().max().map_or(1, |&m| m as usize + 1);
    Dataset::new(images, labels, num_classes, split)
}

/// Parameters of the synthetic class-conditional Gaussian blob task.
#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub classes: usize,
    pub shape: (usize, usize, usize),
    pub noise: f64,
    pub seed: u64,
}

/// Class-mean image built from a few smooth Gaussian bumps, so the signal is
/// low-frequency and visible to convolutional features.
fn bump_pattern(rng: &mut Rng, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut mean = vec![0.5; c * h * w];
    let bumps = 3;
    for ch in 0..c {
        for _ in 0..bumps {
            let cy = rng.next_f64() * h as f64;
            let cx = rng.next_f64() * w as f64;
            let sigma = (h.min(w) as f64) * (0.12 + 0.2 * rng.next_f64());
            let amp = (0.25 + 0.25 * rng.next_f64())
                * if rng.next_f64() < 0.5 { 1.0 } else { -1.0 };
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    mean[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    for m in mean.iter_mut() {
        *m = m.clamp(0.1, 0.9);
    }
    mean
}

/// Generate disjoint train and test splits of the blob task: each class has a
/// fixed smooth mean image and samples add per-pixel Gaussian noise, clamped
/// back to `[0, 1]`. Deterministic for a given spec; `noise = 0` makes all
/// images within a class identical.
pub fn synthetic_blobs(
    spec: &BlobSpec,
    train_count: usize,
    test_count: usize,
) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::Parameter(format!(
            "blob task needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.noise < 0.0 {
        return Err(Error::Parameter("blob noise must be non-negative".into()));
    }
    if train_count == 0 || test_count == 0 {
        return Err(Error::Parameter("blob splits must be non-empty".into()));
    }
    let (c, h, w) = spec.shape;
    let pixels = c * h * w;

    let mut root = Rng::new(spec.seed);
    let mut mean_rng = root.split();
    let mut train_rng = root.split();
    let mut test_rng = root.split();

    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| bump_pattern(&mut mean_rng, c, h, w))
        .collect();

    let make_split = |count: usize, rng: &mut Rng, split: Split| -> Result<Dataset> {
        let mut data = Vec::with_capacity(count * pixels);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % spec.classes;
            labels.push(class as u32);
            let mean = &means[class];
            for &m in mean {
                let v = m + spec.noise * rng.next_standard_normal();
                data.push(v.clamp(0.0, 1.0));
            }
        }
        Dataset::new(
            Tensor::new(&[count, c, h, w], data)?,
            labels,
            spec.classes,
            split,
        )
    };
    let train = make_split(train_count, &mut train_rng, Split::Train)?;
    let test = make_split(test_count, &mut test_rng, Split::Test)?;
    Ok((train, test))
}
