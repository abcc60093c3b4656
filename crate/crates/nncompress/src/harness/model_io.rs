//! The `SLIM` model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "SLIM"
//! u32    version (currently 1)
//! u32*3  input shape (channels, height, width)
//! u32    num_classes
//! u32    layer count
//! per layer:
//!   u8   kind (0 conv2d, 1 dense, 2 relu, 3 maxpool2x2, 4 batchnorm, 5 flatten)
//!   conv2d:    u32*4 weight extents (C, kh, kw, N), payload weight, payload bias
//!   dense:     u32*2 weight extents (in, out),      payload weight, payload bias
//!   batchnorm: u32 channels, f64 momentum, f64 epsilon,
//!              payload scale, shift, running_mean, running_var
//! payload:
//!   u8   flag (0 dense, 1 sparse)
//!   dense:  numel * f32
//!   sparse: ceil(numel/8) mask bytes (bit i of byte j, LSB first, is entry
//!           8j+i; 1 = kept), then one f32 per kept entry in index order
//! ```
//!
//! Weight tensors covered by a prune mask are stored sparse: the bitmask plus
//! the kept values only. Values are f32 on disk, so a round-trip reproduces
//! forward outputs to f32 rounding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{BatchNormParams, Layer, Model};
use crate::prune::PruneMask;
use crate::tensor::Tensor;

const MODEL_MAGIC: &[u8; 4] = b"SLIM";
const MODEL_VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_DENSE: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_MAXPOOL: u8 = 3;
const KIND_BATCHNORM: u8 = 4;
const KIND_FLATTEN: u8 = 5;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_payload(out: &mut Vec<u8>, tensor: &Tensor, mask: Option<&Tensor>) {
    match mask {
        None => {
            out.push(0);
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Some(m) => {
            out.push(1);
            let numel = tensor.numel();
            let mut bits = vec![0u8; numel.div_ceil(8)];
            for (i, &kept) in m.data().iter().enumerate() {
                if kept != 0.0 {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bits);
            for (i, &v) in tensor.data().iter().enumerate() {
                if m.data()[i] != 0.0 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
}

/// Serialize a model (and optionally the prune mask that shaped it) to the
/// container bytes. Weight tensors with a mask entry are stored sparse.
pub fn encode_model(model: &Model, mask: Option<&PruneMask>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut out, MODEL_VERSION);
    let (c, h, w) = model.input_shape;
    push_u32(&mut out, c as u32);
    push_u32(&mut out, h as u32);
    push_u32(&mut out, w as u32);
    push_u32(&mut out, model.num_classes as u32);
    push_u32(&mut out, model.layers.len() as u32);
    for (i, layer) in model.layers.iter().enumerate() {
        let layer_mask = mask.and_then(|m| m.get(&format!("{i}.weight")));
        match layer {
            Layer::Conv2d { weight, bias } => {
                out.push(KIND_CONV);
                for &e in weight.shape() {
                    push_u32(&mut out, e as u32);
                }
                push_payload(&mut out, weight, layer_mask);
                push_payload(&mut out, bias, None);
            }
            Layer::Dense { weight, bias } => {
                out.push(KIND_DENSE);
                for &e in weight.shape() {
                    push_u32(&mut out, e as u32);
                }
                push_payload(&mut out, weight, layer_mask);
                push_payload(&mut out, bias, None);
            }
            Layer::Relu => out.push(KIND_RELU),
            Layer::MaxPool2x2 => out.push(KIND_MAXPOOL),
            Layer::BatchNorm(bn) => {
                out.push(KIND_BATCHNORM);
                push_u32(&mut out, bn.channels() as u32);
                out.extend_from_slice(&bn.momentum.to_le_bytes());
                out.extend_from_slice(&bn.epsilon.to_le_bytes());
                push_payload(&mut out, &bn.scale, None);
                push_payload(&mut out, &bn.shift, None);
                push_payload(&mut out, &bn.running_mean, None);
                push_payload(&mut out, &bn.running_var, None);
            }
            Layer::Flatten => out.push(KIND_FLATTEN),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format(format!(
                "model container truncated ({} bytes left, {n} needed)",
                self.bytes.len()
            )));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_as_f64(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    /// Decode a payload; returns the tensor and the mask when sparse.
    fn payload(&mut self, shape: &[usize]) -> Result<(Tensor, Option<Tensor>)> {
        let numel: usize = shape.iter().product();
        match self.u8()? {
            0 => {
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(self.f32_as_f64()?);
                }
                Ok((Tensor::new(shape, data)?, None))
            }
            1 => {
                let bits = self.take(numel.div_ceil(8))?.to_vec();
                let mut mask = Vec::with_capacity(numel);
                for i in 0..numel {
                    mask.push(if bits[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { 0.0 });
                }
                let mut data = vec![0.0; numel];
                for (i, d) in data.iter_mut().enumerate() {
                    if mask[i] == 1.0 {
                        *d = self.f32_as_f64()?;
                    }
                }
                Ok((Tensor::new(shape, data)?, Some(Tensor::new(shape, mask)?)))
            }
            other => Err(Error::Format(format!("unknown payload flag {other}"))),
        }
    }
}

/// Decode a model container, recovering the prune mask when any layer was
/// stored sparse.
pub fn decode_model(bytes: &[u8]) -> Result<(Model, Option<PruneMask>)> {
    let mut r = Reader { bytes };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model container version {version} (expected {MODEL_VERSION})"
        )));
    }
    let input_shape = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let num_classes = r.u32()? as usize;
    let layer_count = r.u32()? as usize;

    let mut layers = Vec::with_capacity(layer_count);
    let mut mask = PruneMask::default();
    let mut any_sparse = false;
    for i in 0..layer_count {
        match r.u8()? {
            KIND_CONV => {
                let shape = [
                    r.u32()? as usize,
                    r.u32()? as usize,
                    r.u32()? as usize,
                    r.u32()? as usize,
                ];
                let (weight, wmask) = r.payload(&shape)?;
                let (bias, _) = r.payload(&[shape[3]])?;
                if let Some(m) = wmask {
                    mask.insert(format!("{i}.weight"), m)?;
                    any_sparse = true;
                }
                layers.push(Layer::conv2d(weight, bias)?);
            }
            KIND_DENSE => {
                let shape = [r.u32()? as usize, r.u32()? as usize];
                let (weight, wmask) = r.payload(&shape)?;
                let (bias, _) = r.payload(&[shape[1]])?;
                if let Some(m) = wmask {
                    mask.insert(format!("{i}.weight"), m)?;
                    any_sparse = true;
                }
                layers.push(Layer::dense(weight, bias)?);
            }
            KIND_RELU => layers.push(Layer::Relu),
            KIND_MAXPOOL => layers.push(Layer::MaxPool2x2),
            KIND_BATCHNORM => {
                let channels = r.u32()? as usize;
                let momentum = r.f64()?;
                let epsilon = r.f64()?;
                let (scale, _) = r.payload(&[channels])?;
                let (shift, _) = r.payload(&[channels])?;
                let (running_mean, _) = r.payload(&[channels])?;
                let (running_var, _) = r.payload(&[channels])?;
                layers.push(Layer::BatchNorm(BatchNormParams {
                    scale,
                    shift,
                    running_mean,
                    running_var,
                    momentum,
                    epsilon,
                }));
            }
            KIND_FLATTEN => layers.push(Layer::Flatten),
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after model payload",
            r.bytes.len()
        )));
    }
    let model = Model {
        layers,
        input_shape,
        num_classes,
    };
    Ok((model, any_sparse.then_some(mask)))
}

pub fn save_model(model: &Model, mask: Option<&PruneMask>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_model(model, mask))?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, Option<PruneMask>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_model(&bytes)
}
