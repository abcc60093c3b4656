//! Reference architectures: a small VGG-style teacher and two student
//! families, sized for 28x28-scale inputs.
//!
//! Weights use He initialization (normal, std = sqrt(2 / fan_in)); biases
//! start at zero.

use super::{Layer, Model};
use crate::error::Result;
use crate::tensor::{rand_normal, Rng, Tensor};

fn he_conv(rng: &mut Rng, in_ch: usize, k: usize, out_ch: usize) -> Result<Layer> {
    let fan_in = (in_ch * k * k) as f64;
    let weight = rand_normal(rng, &[in_ch, k, k, out_ch], 0.0, (2.0 / fan_in).sqrt())?;
    Layer::conv2d(weight, Tensor::zeros(&[out_ch])?)
}

fn he_dense(rng: &mut Rng, fan_in: usize, out: usize) -> Result<Layer> {
    let weight = rand_normal(rng, &[fan_in, out], 0.0, (2.0 / fan_in as f64).sqrt())?;
    Layer::dense(weight, Tensor::zeros(&[out])?)
}

/// Four 3x3 conv layers and two dense layers (~200k parameters on 1x28x28):
/// the teacher-scale network.
pub fn tiny_vgg(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    rng: &mut Rng,
) -> Result<Model> {
    let (c, h, w) = input_shape;
    let flat = 32 * (h / 4) * (w / 4);
    let model = Model {
        layers: vec![
            he_conv(rng, c, 3, 16)?,
            Layer::Relu,
            he_conv(rng, 16, 3, 16)?,
            Layer::Relu,
            Layer::MaxPool2x2,
            he_conv(rng, 16, 3, 32)?,
            Layer::Relu,
            he_conv(rng, 32, 3, 32)?,
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            he_dense(rng, flat, 120)?,
            Layer::Relu,
            he_dense(rng, 120, num_classes)?,
        ],
        input_shape,
        num_classes,
    };
    model.validate()?;
    Ok(model)
}

/// Two conv layers and a single hidden dense layer (~20k parameters at
/// `hidden = 46` on 1x28x28): the small student family.
pub fn snn_student(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    hidden: usize,
    rng: &mut Rng,
) -> Result<Model> {
    let (c, h, w) = input_shape;
    let flat = 8 * (h / 4) * (w / 4);
    let model = Model {
        layers: vec![
            he_conv(rng, c, 3, 8)?,
            Layer::Relu,
            Layer::MaxPool2x2,
            he_conv(rng, 8, 3, 8)?,
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            he_dense(rng, flat, hidden)?,
            Layer::Relu,
            he_dense(rng, hidden, num_classes)?,
        ],
        input_shape,
        num_classes,
    };
    model.validate()?;
    Ok(model)
}

/// Like [`snn_student`] with a wider second conv and an extra 84-unit hidden
/// layer before the output (~50k parameters at `hidden = 56` on 1x28x28).
pub fn cnn_student(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    hidden: usize,
    rng: &mut Rng,
) -> Result<Model> {
    let (c, h, w) = input_shape;
    let flat = 16 * (h / 4) * (w / 4);
    let model = Model {
        layers: vec![
            he_conv(rng, c, 3, 8)?,
            Layer::Relu,
            Layer::MaxPool2x2,
            he_conv(rng, 8, 3, 16)?,
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            he_dense(rng, flat, hidden)?,
            Layer::Relu,
            he_dense(rng, hidden, 84)?,
            Layer::Relu,
            he_dense(rng, 84, num_classes)?,
        ],
        input_shape,
        num_classes,
    };
    model.validate()?;
    Ok(model)
}
