//! Knowledge distillation: temperature-softened targets from a frozen
//! teacher plus a mixed soft/hard loss for the student.
//!
//! The soft term is the KL divergence between teacher and student
//! distributions at temperature T, scaled by T^2 so matched logits give zero
//! loss and gradient magnitudes stay comparable across temperatures. The hard
//! term is ordinary cross-entropy at T = 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::nn::{self, cross_entropy, Model, TrainConfig, TrainOutcome};
use crate::tensor::Tensor;

const SOFT_TARGET_MAGIC: &[u8; 4] = b"SLMT";
const SOFT_TARGET_VERSION: u32 = 1;

/// Mixing parameters for the distillation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Softening temperature, at least 1.
    pub temperature: f64,
    /// Weight on the soft-target term in `[0, 1]`; the hard-label term gets
    /// `1 - soft_weight`.
    pub soft_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 4.0,
            soft_weight: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 1.0 {
            return Err(Error::Parameter(format!(
                "distillation temperature must be >= 1, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.soft_weight) {
            return Err(Error::Parameter(format!(
                "soft weight must be in [0, 1], got {}",
                self.soft_weight
            )));
        }
        Ok(())
    }
}

/// Per-example class probability rows produced at some temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    probs: Tensor,
    temperature: f64,
}

impl SoftTargets {
    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.classes();
        &self.probs.data()[i * c..(i + 1) * c]
    }

    /// Copy the listed rows into a `(k, classes)` tensor, for a minibatch.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let c = self.classes();
        let mut out = vec![0.0; indices.len() * c];
        for (r, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "no soft target for example {i} (only {} cached)",
                    self.len()
                )));
            }
            out[r * c..(r + 1) * c].copy_from_slice(self.row(i));
        }
        Tensor::new(&[indices.len(), c], out)
    }

    /// Serialize to the soft-target cache format: magic `SLMT`, version u32,
    /// example count u64, class count u32, temperature f64 (all
    /// little-endian), then row-major f32 probabilities.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.probs.numel() * 4);
        out.extend_from_slice(SOFT_TARGET_MAGIC);
        out.extend_from_slice(&SOFT_TARGET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.classes() as u32).to_le_bytes());
        out.extend_from_slice(&self.temperature.to_le_bytes());
        for &p in self.probs.data() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_chunk(&mut r, &mut magic)?;
        if &magic != SOFT_TARGET_MAGIC {
            return Err(Error::Format("not a soft-target cache (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SOFT_TARGET_VERSION {
            return Err(Error::Format(format!(
                "unsupported soft-target version {version}"
            )));
        }
        let count = read_u64(&mut r)? as usize;
        let classes = read_u32(&mut r)? as usize;
        let temperature = read_f64(&mut r)?;
        if classes == 0 || count == 0 {
            return Err(Error::Format("empty soft-target cache".into()));
        }
        let mut data = Vec::with_capacity(count * classes);
        for _ in 0..count * classes {
            let mut b = [0u8; 4];
            read_chunk(&mut r, &mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after soft-target payload",
                r.len()
            )));
        }
        Ok(SoftTargets {
            probs: Tensor::new(&[count, classes], data)?,
            temperature,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_chunk(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if r.len() < out.len() {
        return Err(Error::Format("soft-target cache truncated".into()));
    }
    let (head, tail) = r.split_at(out.len());
    out.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_chunk(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_chunk(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_chunk(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Row-wise softmax of `logits / T`, computed with max subtraction.
pub fn soften(logits: &Tensor, temperature: f64) -> Result<SoftTargets> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!(
            "soften expects rank-2 logits, got {:?}",
            logits.shape()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("soften logits are not finite".into()));
    }
    let scaled = logits.scale(1.0 / temperature);
    Ok(SoftTargets {
        probs: nn::softmax_rows(&scaled)?,
        temperature,
    })
}

/// Run the frozen teacher over the whole dataset in eval mode and soften its
/// logits. Deterministic, so the cached file is byte-stable across runs.
pub fn generate_soft_targets(
    teacher: &Model,
    data: &Dataset,
    temperature: f64,
) -> Result<SoftTargets> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let classes = teacher.num_classes;
    let mut rows = Vec::with_capacity(data.len() * classes);
    let chunk = 256;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = teacher.forward(&data.gather_images(&idx)?)?;
        let soft = soften(&logits, temperature)?;
        rows.extend_from_slice(soft.probs.data());
        start = end;
    }
    Ok(SoftTargets {
        probs: Tensor::new(&[data.len(), classes], rows)?,
        temperature,
    })
}

/// Mixed distillation loss and its gradient with respect to the student
/// logits:
///
/// `soft_weight * T^2 * KL(teacher || student_at_T) +
///  (1 - soft_weight) * cross_entropy(student, hard_labels)`
pub fn kd_loss(
    student_logits: &Tensor,
    soft_batch: &Tensor,
    hard_labels: &[u32],
    cfg: &DistillConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    if student_logits.shape() != soft_batch.shape() {
        return Err(Error::Dimension(format!(
            "student logits {:?} vs soft targets {:?}",
            student_logits.shape(),
            soft_batch.shape()
        )));
    }
    // The ends of the mixing range reduce exactly to one term; take those
    // paths so bit-level identities (lambda = 0 vs plain training) hold.
    if cfg.soft_weight == 0.0 {
        return cross_entropy(student_logits, hard_labels);
    }

    let t = cfg.temperature;
    let (rows, cols) = (student_logits.shape()[0], student_logits.shape()[1]);
    let student_soft = nn::softmax_rows(&student_logits.scale(1.0 / t))?;
    let inv_batch = 1.0 / rows as f64;

    // KL(p || q) = sum p * (ln p - ln q), with 0 ln 0 = 0.
    let mut kl_sum = 0.0;
    for i in 0..rows * cols {
        let p = soft_batch.data()[i];
        if p > 0.0 {
            kl_sum += p * (p.ln() - student_soft.data()[i].ln());
        }
    }
    let soft_loss = t * t * kl_sum * inv_batch;
    // d/dz of the mean T^2 KL term is T * (q - p) / batch.
    let mut grad: Vec<f64> = student_soft
        .data()
        .iter()
        .zip(soft_batch.data())
        .map(|(&q, &p)| cfg.soft_weight * t * (q - p) * inv_batch)
        .collect();

    if cfg.soft_weight == 1.0 {
        return Ok((soft_loss, Tensor::new(&[rows, cols], grad)?));
    }

    let (hard_loss, hard_grad) = cross_entropy(student_logits, hard_labels)?;
    for (g, &h) in grad.iter_mut().zip(hard_grad.data()) {
        *g += (1.0 - cfg.soft_weight) * h;
    }
    let loss = cfg.soft_weight * soft_loss + (1.0 - cfg.soft_weight) * hard_loss;
    Ok((loss, Tensor::new(&[rows, cols], grad)?))
}

/// Standard training loop with [`kd_loss`] in place of cross-entropy. The
/// soft targets must cover the whole training set.
pub fn distill_train(
    student: Model,
    data: &Dataset,
    soft: &SoftTargets,
    cfg: &TrainConfig,
    dcfg: &DistillConfig,
) -> Result<TrainOutcome> {
    dcfg.validate()?;
    if soft.len() < data.len() {
        return Err(Error::Data(format!(
            "soft targets cover {} examples but the training set has {}",
            soft.len(),
            data.len()
        )));
    }
    if soft.classes() != student.num_classes {
        return Err(Error::Dimension(format!(
            "soft targets have {} classes, student emits {}",
            soft.classes(),
            student.num_classes
        )));
    }
    let labels = data.labels().to_vec();
    let mut loss = |logits: &Tensor, idx: &[usize]| {
        let soft_batch = soft.gather(idx)?;
        let hard: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
        kd_loss(logits, &soft_batch, &hard, dcfg)
    };
    nn::train_with_loss(student, data, cfg, &mut [], &mut loss)
}
