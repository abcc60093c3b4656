//! Layers, forward/backward passes, the SGD training loop, and losses.
//!
//! The engine is deliberately small: six layer kinds, plain SGD with optional
//! weight decay, and a hook mechanism on the training loop that the pruning
//! and distillation passes use to interpose. Everything is `f64` and
//! bit-deterministic for a fixed seed.

mod arch;
mod conv;
mod loss;

pub use arch::{cnn_student, snn_student, tiny_vgg};
pub use loss::{cross_entropy, softmax_rows};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::tensor::{Rng, Tensor};
use conv::ConvDims;

/// Per-channel batch-normalization state. `scale` and `shift` are trainable;
/// the running statistics are buffers folded in from batch statistics after
/// each training step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    /// Identity transform over `channels` channels: scale 1, shift 0, neutral
    /// running statistics.
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(BatchNormParams {
            scale: Tensor::full(&[channels], 1.0)?,
            shift: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            momentum: 0.1,
            epsilon: 1e-5,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }
}

/// One layer of a [`Model`].
///
/// Convolution weights are `(in_channels, kh, kw, out_channels)`; dense
/// weights are `(in_features, out_features)`. Convolutions use stride 1 and
/// zero padding of `floor(k/2)` per axis, so odd kernels preserve spatial
/// size.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d { weight: Tensor, bias: Tensor },
    Dense { weight: Tensor, bias: Tensor },
    Relu,
    MaxPool2x2,
    BatchNorm(BatchNormParams),
    Flatten,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Flatten => "flatten",
        }
    }

    /// Convolution layer from a `(C, kh, kw, N)` weight tensor.
    pub fn conv2d(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::Dimension(format!(
                "conv weight must be rank-4 (in, kh, kw, out), got {:?}",
                weight.shape()
            )));
        }
        if bias.rank() != 1 || bias.numel() != weight.shape()[3] {
            return Err(Error::Dimension(format!(
                "conv bias {:?} does not match {} output channels",
                bias.shape(),
                weight.shape()[3]
            )));
        }
        Ok(Layer::Conv2d { weight, bias })
    }

    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Dimension(format!(
                "dense weight must be rank-2 (in, out), got {:?}",
                weight.shape()
            )));
        }
        if bias.rank() != 1 || bias.numel() != weight.shape()[1] {
            return Err(Error::Dimension(format!(
                "dense bias {:?} does not match {} outputs",
                bias.shape(),
                weight.shape()[1]
            )));
        }
        Ok(Layer::Dense { weight, bias })
    }
}

/// Ordered layer graph with an input shape and a class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

/// Named parameter gradients, keyed like the model's parameters
/// (`"{layer}.{param}"`).
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}

/// Activations recorded by a train-mode forward pass, consumed by
/// [`Model::backward`].
pub struct ForwardCache {
    layer_caches: Vec<LayerCache>,
    logits_shape: Vec<usize>,
}

enum LayerCache {
    Conv { input: Tensor },
    Dense { input: Tensor },
    Relu { input: Tensor },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    BatchNorm(BnCache),
    Flatten { input_shape: Vec<usize> },
}

struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_running: Vec<f64>,
}

impl Model {
    /// Names of all trainable parameters, in layer order.
    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters().into_iter().map(|(n, _)| n).collect()
    }

    /// All trainable parameters (running statistics are buffers, not
    /// parameters).
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d { weight, bias } | Layer::Dense { weight, bias } => {
                    out.push((format!("{i}.weight"), weight));
                    out.push((format!("{i}.bias"), bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{i}.scale"), &bn.scale));
                    out.push((format!("{i}.shift"), &bn.shift));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv2d { weight, bias } | Layer::Dense { weight, bias } => {
                    out.push((format!("{i}.weight"), weight));
                    out.push((format!("{i}.bias"), bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{i}.scale"), &mut bn.scale));
                    out.push((format!("{i}.shift"), &mut bn.shift));
                }
                _ => {}
            }
        }
        out
    }

    /// Convolution and dense weight matrices: the compressible parameter
    /// store. Biases and BatchNorm parameters are excluded; pruning and
    /// compression accounting both operate on this set.
    pub fn weight_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d { weight, .. } | Layer::Dense { weight, .. } => {
                    out.push((format!("{i}.weight"), weight));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.parameters_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total trainable parameter count.
    pub fn total_params(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Run a one-example zero batch through the network to confirm layer
    /// shapes compose and the last layer emits `num_classes` logits.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let probe = Tensor::zeros(&[1, c, h, w])?;
        let logits = self.forward(&probe)?;
        if logits.shape() != [1, self.num_classes] {
            return Err(Error::Dimension(format!(
                "model emits {:?}, expected [1, {}] logits",
                logits.shape(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass (BatchNorm uses running statistics).
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.run_forward(batch, false)?.0)
    }

    /// Train-mode forward pass (BatchNorm uses batch statistics). Pure: the
    /// running statistics it would fold in are recorded in the cache and only
    /// applied by [`Model::apply_batch_stats`].
    pub fn forward_train(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (logits, cache) = self.run_forward(batch, true)?;
        Ok((logits, cache.expect("train forward always builds a cache")))
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match input shape (N, {c}, {h}, {w})",
                batch.shape()
            )));
        }
        Ok(())
    }

    fn run_forward(&self, batch: &Tensor, train: bool) -> Result<(Tensor, Option<ForwardCache>)> {
        self.check_input(batch)?;
        let mut caches = train.then(Vec::new);
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = layer_forward(layer, &x, train)
                .map_err(|e| Error::Dimension(format!("layer {i} ({}): {e}", layer.kind_name())))?;
            if let Some(caches) = caches.as_mut() {
                caches.push(cache);
            }
            x = next;
        }
        if x.rank() != 2 || x.shape()[1] != self.num_classes {
            return Err(Error::Dimension(format!(
                "network emitted {:?}, expected (N, {}) logits",
                x.shape(),
                self.num_classes
            )));
        }
        let cache = caches.map(|layer_caches| ForwardCache {
            layer_caches,
            logits_shape: x.shape().to_vec(),
        });
        Ok((x, cache))
    }

    /// Backpropagate `grad_logits` through the cached forward pass, producing
    /// a gradient for every trainable parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients> {
        if cache.layer_caches.len() != self.layers.len() {
            return Err(Error::State(format!(
                "forward cache covers {} layers, model has {}",
                cache.layer_caches.len(),
                self.layers.len()
            )));
        }
        if grad_logits.shape() != cache.logits_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "grad_logits shape {:?} does not match logits {:?}",
                grad_logits.shape(),
                cache.logits_shape
            )));
        }
        let mut grads = Gradients::default();
        let mut g = grad_logits.clone();
        for (i, (layer, lc)) in self
            .layers
            .iter()
            .zip(&cache.layer_caches)
            .enumerate()
            .rev()
        {
            g = layer_backward(layer, lc, &g, i, &mut grads)?;
        }
        Ok(grads)
    }

    /// Fold the batch statistics recorded during a train-mode forward pass
    /// into each BatchNorm layer's running statistics.
    pub fn apply_batch_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        if cache.layer_caches.len() != self.layers.len() {
            return Err(Error::State(
                "forward cache does not match model layers".into(),
            ));
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layer_caches) {
            if let (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) = (layer, lc) {
                let m = bn.momentum;
                for ch in 0..bn.channels() {
                    let rm = &mut bn.running_mean.data_mut()[ch];
                    *rm = (1.0 - m) * *rm + m * c.batch_mean[ch];
                    let rv = &mut bn.running_var.data_mut()[ch];
                    *rv = (1.0 - m) * *rv + m * c.batch_var_running[ch];
                }
            }
        }
        Ok(())
    }
}

fn layer_forward(layer: &Layer, x: &Tensor, train: bool) -> Result<(Tensor, LayerCache)> {
    match layer {
        Layer::Conv2d { weight, bias } => {
            let dims = conv_dims(x, weight)?;
            let (oh, ow) = dims.out_hw();
            let out = conv::forward(x.data(), weight.data(), bias.data(), &dims);
            let out = Tensor::new(&[dims.batch, dims.out_ch, oh, ow], out)?;
            Ok((out, LayerCache::Conv { input: x.clone() }))
        }
        Layer::Dense { weight, bias } => {
            if x.rank() != 2 {
                return Err(Error::Dimension(format!(
                    "dense layer expects rank-2 input, got {:?} (missing Flatten?)",
                    x.shape()
                )));
            }
            let mut out = x.matmul(weight)?;
            let cols = out.shape()[1];
            for row in 0..out.shape()[0] {
                let dst = &mut out.data_mut()[row * cols..(row + 1) * cols];
                for (d, &b) in dst.iter_mut().zip(bias.data()) {
                    *d += b;
                }
            }
            Ok((out, LayerCache::Dense { input: x.clone() }))
        }
        Layer::Relu => {
            let out = x.map(|v| v.max(0.0));
            Ok((out, LayerCache::Relu { input: x.clone() }))
        }
        Layer::MaxPool2x2 => {
            if x.rank() != 4 {
                return Err(Error::Dimension(format!(
                    "maxpool expects rank-4 input, got {:?}",
                    x.shape()
                )));
            }
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (h / 2, w / 2);
            if oh == 0 || ow == 0 {
                return Err(Error::Dimension(format!(
                    "maxpool input {:?} too small to pool",
                    x.shape()
                )));
            }
            let mut out = vec![0.0; b * c * oh * ow];
            let mut argmax = vec![0usize; b * c * oh * ow];
            for bi in 0..b {
                for ci in 0..c {
                    let plane_off = (bi * c + ci) * h * w;
                    let out_off = (bi * c + ci) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best_idx = plane_off + (2 * oy) * w + 2 * ox;
                            let mut best = x.data()[best_idx];
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = plane_off + (2 * oy + dy) * w + 2 * ox + dx;
                                    let v = x.data()[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[out_off + oy * ow + ox] = best;
                            argmax[out_off + oy * ow + ox] = best_idx;
                        }
                    }
                }
            }
            Ok((
                Tensor::new(&[b, c, oh, ow], out)?,
                LayerCache::MaxPool {
                    input_shape: x.shape().to_vec(),
                    argmax,
                },
            ))
        }
        Layer::BatchNorm(bn) => batchnorm_forward(bn, x, train),
        Layer::Flatten => {
            if x.rank() < 2 {
                return Err(Error::Dimension("flatten expects rank >= 2".into()));
            }
            let b = x.shape()[0];
            let rest: usize = x.shape()[1..].iter().product();
            let out = x.reshape(&[b, rest])?;
            Ok((
                out,
                LayerCache::Flatten {
                    input_shape: x.shape().to_vec(),
                },
            ))
        }
    }
}

fn conv_dims(x: &Tensor, weight: &Tensor) -> Result<ConvDims> {
    if x.rank() != 4 {
        return Err(Error::Dimension(format!(
            "conv expects rank-4 input, got {:?}",
            x.shape()
        )));
    }
    let ws = weight.shape();
    if x.shape()[1] != ws[0] {
        return Err(Error::Dimension(format!(
            "input has {} channels, conv weight expects {}",
            x.shape()[1],
            ws[0]
        )));
    }
    Ok(ConvDims {
        batch: x.shape()[0],
        in_ch: ws[0],
        h: x.shape()[2],
        w: x.shape()[3],
        out_ch: ws[3],
        kh: ws[1],
        kw: ws[2],
    })
}

/// Channel layout of a BatchNorm input: `(outer, channels, inner)` where the
/// flat index is `((o * channels) + c) * inner + i`.
fn bn_layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    match x.rank() {
        2 if x.shape()[1] == channels => Ok((x.shape()[0], 1)),
        4 if x.shape()[1] == channels => Ok((x.shape()[0], x.shape()[2] * x.shape()[3])),
        _ => Err(Error::Dimension(format!(
            "batchnorm over {channels} channels cannot apply to input {:?}",
            x.shape()
        ))),
    }
}

fn batchnorm_forward(bn: &BatchNormParams, x: &Tensor, train: bool) -> Result<(Tensor, LayerCache)> {
    let channels = bn.channels();
    let (outer, inner) = bn_layout(x, channels)?;
    let count = outer * inner;
    let mut out = vec![0.0; x.numel()];

    if !train {
        for c in 0..channels {
            let mean = bn.running_mean.data()[c];
            let var = bn.running_var.data()[c];
            let inv_std = 1.0 / (var + bn.epsilon).sqrt();
            let gamma = bn.scale.data()[c];
            let beta = bn.shift.data()[c];
            for o in 0..outer {
                let off = (o * channels + c) * inner;
                for i in 0..inner {
                    out[off + i] = gamma * (x.data()[off + i] - mean) * inv_std + beta;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        // Eval cache is a placeholder; backward requires a train-mode pass.
        return Ok((
            out,
            LayerCache::BatchNorm(BnCache {
                xhat: Tensor::zeros(&[1])?,
                inv_std: Vec::new(),
                batch_mean: Vec::new(),
                batch_var_running: Vec::new(),
            }),
        ));
    }

    let mut xhat = vec![0.0; x.numel()];
    let mut inv_stds = Vec::with_capacity(channels);
    let mut means = Vec::with_capacity(channels);
    let mut vars_running = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut sum = 0.0;
        for o in 0..outer {
            let off = (o * channels + c) * inner;
            sum += x.data()[off..off + inner].iter().sum::<f64>();
        }
        let mean = sum / count as f64;
        let mut sq = 0.0;
        for o in 0..outer {
            let off = (o * channels + c) * inner;
            for i in 0..inner {
                let d = x.data()[off + i] - mean;
                sq += d * d;
            }
        }
        let var = sq / count as f64; // biased, used for normalization
        let inv_std = 1.0 / (var + bn.epsilon).sqrt();
        let gamma = bn.scale.data()[c];
        let beta = bn.shift.data()[c];
        for o in 0..outer {
            let off = (o * channels + c) * inner;
            for i in 0..inner {
                let xh = (x.data()[off + i] - mean) * inv_std;
                xhat[off + i] = xh;
                out[off + i] = gamma * xh + beta;
            }
        }
        inv_stds.push(inv_std);
        means.push(mean);
        // Running variance uses the unbiased estimate when possible.
        let var_running = if count > 1 {
            sq / (count - 1) as f64
        } else {
            var
        };
        vars_running.push(var_running);
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        LayerCache::BatchNorm(BnCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std: inv_stds,
            batch_mean: means,
            batch_var_running: vars_running,
        }),
    ))
}

fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    grad_out: &Tensor,
    index: usize,
    grads: &mut Gradients,
) -> Result<Tensor> {
    match (layer, cache) {
        (Layer::Conv2d { weight, .. }, LayerCache::Conv { input }) => {
            let dims = conv_dims(input, weight)?;
            let (gin, gw, gb) = conv::backward(input.data(), weight.data(), grad_out.data(), &dims);
            grads.insert(format!("{index}.weight"), Tensor::new(weight.shape(), gw)?);
            grads.insert(
                format!("{index}.bias"),
                Tensor::new(&[dims.out_ch], gb)?,
            );
            Tensor::new(input.shape(), gin)
        }
        (Layer::Dense { weight, .. }, LayerCache::Dense { input }) => {
            let gw = input.transpose()?.matmul(grad_out)?;
            let cols = grad_out.shape()[1];
            let mut gb = vec![0.0; cols];
            for row in 0..grad_out.shape()[0] {
                for (g, &v) in gb
                    .iter_mut()
                    .zip(&grad_out.data()[row * cols..(row + 1) * cols])
                {
                    *g += v;
                }
            }
            grads.insert(format!("{index}.weight"), gw);
            grads.insert(format!("{index}.bias"), Tensor::new(&[cols], gb)?);
            grad_out.matmul(&weight.transpose()?)
        }
        (Layer::Relu, LayerCache::Relu { input }) => {
            grad_out.zip_map(input, |g, x| if x > 0.0 { g } else { 0.0 })
        }
        (Layer::MaxPool2x2, LayerCache::MaxPool { input_shape, argmax }) => {
            let mut gin = vec![0.0; input_shape.iter().product()];
            for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                gin[src] += g;
            }
            Tensor::new(input_shape, gin)
        }
        (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
            if c.inv_std.is_empty() {
                return Err(Error::State(
                    "batchnorm backward requires a train-mode forward cache".into(),
                ));
            }
            let channels = bn.channels();
            let (outer, inner) = bn_layout(&c.xhat, channels)?;
            let count = (outer * inner) as f64;
            let mut gin = vec![0.0; c.xhat.numel()];
            let mut gscale = vec![0.0; channels];
            let mut gshift = vec![0.0; channels];
            for ch in 0..channels {
                let gamma = bn.scale.data()[ch];
                let inv_std = c.inv_std[ch];
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for o in 0..outer {
                    let off = (o * channels + ch) * inner;
                    for i in 0..inner {
                        let dy = grad_out.data()[off + i];
                        sum_dy += dy;
                        sum_dy_xhat += dy * c.xhat.data()[off + i];
                    }
                }
                gshift[ch] = sum_dy;
                gscale[ch] = sum_dy_xhat;
                for o in 0..outer {
                    let off = (o * channels + ch) * inner;
                    for i in 0..inner {
                        let dy = grad_out.data()[off + i];
                        let xh = c.xhat.data()[off + i];
                        gin[off + i] = gamma * inv_std
                            * (dy - sum_dy / count - xh * sum_dy_xhat / count);
                    }
                }
            }
            grads.insert(format!("{index}.scale"), Tensor::new(&[channels], gscale)?);
            grads.insert(format!("{index}.shift"), Tensor::new(&[channels], gshift)?);
            Tensor::new(c.xhat.shape(), gin)
        }
        (Layer::Flatten, LayerCache::Flatten { input_shape }) => grad_out.reshape(input_shape),
        _ => Err(Error::State(format!(
            "forward cache does not match layer {index} ({})",
            layer.kind_name()
        ))),
    }
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("step count must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One SGD descent update: `w <- w - lr * (grad + weight_decay * w)`.
///
/// The gradient key set must match the model's parameters exactly.
pub fn sgd_step(model: &mut Model, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    let params = model.parameters_mut();
    if grads.len() != params.len() {
        return Err(Error::State(format!(
            "gradients carry {} tensors, model has {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (name, w) in params {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::State(format!("missing gradient for parameter {name}")))?;
        if g.shape() != w.shape() {
            return Err(Error::State(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                w.shape()
            )));
        }
        for (wi, &gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= cfg.learning_rate * (gi + cfg.weight_decay * *wi);
        }
    }
    Ok(())
}

/// Callback invoked after every optimizer step with the 1-based step index.
/// Schedule events at t = 0 are the caller's responsibility before entering
/// the loop.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &mut Model) -> Result<()>;

/// Per-batch loss: maps `(logits, dataset indices of the batch)` to a scalar
/// loss and its gradient with respect to the logits.
pub type BatchLoss<'a> = dyn FnMut(&Tensor, &[usize]) -> Result<(f64, Tensor)> + 'a;

/// A trained model plus its per-step loss trace.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub loss_trace: Vec<f64>,
}

/// Minibatch SGD against the cross-entropy loss on the dataset's labels.
pub fn train(
    model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    hooks: &mut [StepHook],
) -> Result<TrainOutcome> {
    let labels = data.labels().to_vec();
    let mut loss = move |logits: &Tensor, idx: &[usize]| {
        let batch_labels: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
        cross_entropy(logits, &batch_labels)
    };
    train_with_loss(model, data, cfg, hooks, &mut loss)
}

/// Minibatch SGD with a caller-supplied loss. Batches are drawn by
/// deterministic epoch shuffling from the config seed; the loss trace has one
/// entry per step.
pub fn train_with_loss(
    mut model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    hooks: &mut [StepHook],
    loss_fn: &mut BatchLoss,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training dataset is empty".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let batch_size = cfg.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = order.len(); // trigger a shuffle on the first step
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        if pos + batch_size > order.len() {
            rng.shuffle(&mut order);
            pos = 0;
        }
        let idx = &order[pos..pos + batch_size];
        pos += batch_size;

        let batch = data.gather_images(idx)?;
        let (logits, cache) = model.forward_train(&batch)?;
        let (loss, grad_logits) = loss_fn(&logits, idx)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged at step {step}: {loss}"
            )));
        }
        let grads = model.backward(&cache, &grad_logits)?;
        sgd_step(&mut model, &grads, cfg)?;
        model.apply_batch_stats(&cache)?;
        trace.push(loss);
        for hook in hooks.iter_mut() {
            hook(step, &mut model)
                .map_err(|e| Error::State(format!("hook failed at step {step}: {e}")))?;
        }
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

/// Top-1 accuracy over a labelled dataset. Argmax ties break toward the
/// lowest class index.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("evaluation dataset is empty".into()));
    }
    let mut correct = 0usize;
    let chunk = 256;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = data.gather_images(&idx)?;
        let logits = model.forward(&batch)?;
        let cols = logits.shape()[1];
        for (row, &i) in idx.iter().enumerate() {
            let scores = &logits.data()[row * cols..(row + 1) * cols];
            if argmax(scores) == data.labels()[i] as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Apply a single convolution outside a network: `(N, C, H, W)` input with a
/// `(C, kh, kw, N_out)` kernel, stride 1, zero padding `floor(k/2)` per axis.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weight.rank() != 4 {
        return Err(Error::Dimension(format!(
            "conv weight must be rank-4, got {:?}",
            weight.shape()
        )));
    }
    let dims = conv_dims(input, weight)?;
    if bias.numel() != dims.out_ch {
        return Err(Error::Dimension(format!(
            "bias {:?} does not match {} output channels",
            bias.shape(),
            dims.out_ch
        )));
    }
    let (oh, ow) = dims.out_hw();
    let out = conv::forward(input.data(), weight.data(), bias.data(), &dims);
    Tensor::new(&[dims.batch, dims.out_ch, oh, ow], out)
}

/// Index of the largest value; first occurrence wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
