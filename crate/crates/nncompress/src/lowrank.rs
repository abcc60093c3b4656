//! SVD low-rank factorization of convolution kernels.
//!
//! A `(C, d, d, N)` kernel tensor is matricized to `Cd x dN`, decomposed, and
//! rebuilt as a vertical `d x 1` convolution (C -> K channels) followed by a
//! horizontal `1 x d` convolution (K -> N channels), which constrains the
//! layer's rank to K. BatchNorm is placed on every H layer to keep the deeper
//! rewritten network trainable.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{BatchNormParams, Layer, Model};
use crate::tensor::{svd, Tensor};

/// Per-conv-layer target rank, keyed by layer index in the model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FactorizationPlan {
    ranks: BTreeMap<usize, usize>,
}

impl FactorizationPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_rank(&mut self, layer: usize, k: usize) {
        self.ranks.insert(layer, k);
    }

    pub fn rank_for(&self, layer: usize) -> Option<usize> {
        self.ranks.get(&layer).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ranks.iter().map(|(&l, &k)| (l, k))
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }
}

/// The factor pair for one convolution layer: vertical filters
/// `(C, d, 1, K)`, horizontal filters `(K, 1, d, N)`, the BatchNorm placed on
/// the H output (identity at rewrite time), and the singular values the
/// truncation discarded.
#[derive(Debug, Clone)]
pub struct SeparablePair {
    pub v_kernel: Tensor,
    pub h_kernel: Tensor,
    pub h_batchnorm: BatchNormParams,
    pub discarded_spectrum: Vec<f64>,
}

impl SeparablePair {
    pub fn rank(&self) -> usize {
        self.v_kernel.shape()[3]
    }

    /// Sum the per-rank outer products back into a `(C, d, d, N)` kernel: the
    /// rank-K truncation of the original.
    pub fn recompose(&self) -> Result<Tensor> {
        let (c, d, k) = (
            self.v_kernel.shape()[0],
            self.v_kernel.shape()[1],
            self.v_kernel.shape()[3],
        );
        let n = self.h_kernel.shape()[3];
        let mut out = vec![0.0; c * d * d * n];
        for ci in 0..c {
            for i2 in 0..d {
                for i3 in 0..d {
                    for ni in 0..n {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            // v_kernel (C,d,1,K) and h_kernel (K,1,d,N) with
                            // their singleton axes collapsed out of the index.
                            let v = self.v_kernel.data()[(ci * d + i2) * k + ki];
                            let h = self.h_kernel.data()[(ki * d + i3) * n + ni];
                            acc += v * h;
                        }
                        out[((ci * d + i2) * d + i3) * n + ni] = acc;
                    }
                }
            }
        }
        Tensor::new(&[c, d, d, n], out)
    }
}

fn conv_kernel_dims(w: &Tensor) -> Result<(usize, usize, usize)> {
    if w.rank() != 4 {
        return Err(Error::Parameter(format!(
            "expected a rank-4 kernel tensor, got {:?}",
            w.shape()
        )));
    }
    let s = w.shape();
    if s[1] != s[2] {
        return Err(Error::Parameter(format!(
            "kernel spatial dims must be square, got {}x{}",
            s[1], s[2]
        )));
    }
    Ok((s[0], s[1], s[3]))
}

/// Map a `(C, d, d, N)` kernel tensor to the `Cd x dN` matrix via the index
/// bijection `j1 = c*d + i2`, `j2 = n*d + i3` (0-based).
pub fn matricize(w: &Tensor) -> Result<Tensor> {
    let (c, d, n) = conv_kernel_dims(w)?;
    let cols = d * n;
    let mut out = vec![0.0; c * d * d * n];
    for ci in 0..c {
        for i2 in 0..d {
            for i3 in 0..d {
                for ni in 0..n {
                    out[(ci * d + i2) * cols + (ni * d + i3)] =
                        w.data()[((ci * d + i2) * d + i3) * n + ni];
                }
            }
        }
    }
    Tensor::new(&[c * d, cols], out)
}

/// Exact inverse of [`matricize`].
pub fn dematricize(m: &Tensor, c: usize, d: usize, n: usize) -> Result<Tensor> {
    if m.rank() != 2 || m.shape() != [c * d, d * n] {
        return Err(Error::Parameter(format!(
            "matrix shape {:?} does not match (C*d, d*N) = ({}, {})",
            m.shape(),
            c * d,
            d * n
        )));
    }
    let cols = d * n;
    let mut out = vec![0.0; c * d * d * n];
    for ci in 0..c {
        for i2 in 0..d {
            for i3 in 0..d {
                for ni in 0..n {
                    out[((ci * d + i2) * d + i3) * n + ni] =
                        m.data()[(ci * d + i2) * cols + (ni * d + i3)];
                }
            }
        }
    }
    Tensor::new(&[c, d, d, n], out)
}

/// Build the vertical/horizontal factor pair from the top-K singular triplets
/// of the matricized kernel, each factor scaled by `sqrt(s_k)`.
pub fn factorize_layer(w: &Tensor, k: usize) -> Result<SeparablePair> {
    let (c, d, n) = conv_kernel_dims(w)?;
    let max_rank = (c * d).min(d * n);
    if k == 0 || k > max_rank {
        return Err(Error::Parameter(format!(
            "rank {k} out of range [1, {max_rank}] for kernel {:?}",
            w.shape()
        )));
    }
    let m = matricize(w)?;
    let dec = svd(&m)?;
    let r = dec.s.numel();

    let mut v_kernel = vec![0.0; c * d * k];
    let mut h_kernel = vec![0.0; k * d * n];
    for ki in 0..k {
        let scale = dec.s.data()[ki].sqrt();
        for ci in 0..c {
            for j in 0..d {
                v_kernel[(ci * d + j) * k + ki] = dec.u.data()[(ci * d + j) * r + ki] * scale;
            }
        }
        for ni in 0..n {
            for j in 0..d {
                h_kernel[(ki * d + j) * n + ni] = dec.v.data()[(ni * d + j) * r + ki] * scale;
            }
        }
    }
    Ok(SeparablePair {
        v_kernel: Tensor::new(&[c, d, 1, k], v_kernel)?,
        h_kernel: Tensor::new(&[k, 1, d, n], h_kernel)?,
        h_batchnorm: BatchNormParams::identity(n)?,
        discarded_spectrum: dec.s.data()[k..].to_vec(),
    })
}

/// Smallest rank per conv layer whose leading singular energy reaches
/// `energy` of the total, after dropping numerically-zero singular values.
/// 1x1 convolutions are skipped (no spatial structure to factor).
pub fn choose_ranks(model: &Model, energy: f64) -> Result<FactorizationPlan> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::Parameter(format!(
            "energy threshold must be in (0, 1], got {energy}"
        )));
    }
    let mut plan = FactorizationPlan::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let Layer::Conv2d { weight, .. } = layer else {
            continue;
        };
        let (_, d, _) = conv_kernel_dims(weight)?;
        if d == 1 {
            continue;
        }
        let dec = svd(&matricize(weight)?)?;
        let s = dec.s.data();
        let s_max = s.first().copied().unwrap_or(0.0);
        let cleaned: Vec<f64> = s
            .iter()
            .copied()
            .filter(|&x| x > 1e-12 * s_max)
            .collect();
        let total: f64 = cleaned.iter().map(|x| x * x).sum();
        let mut k = cleaned.len().max(1);
        if total > 0.0 {
            let mut prefix = 0.0;
            for (idx, &sv) in cleaned.iter().enumerate() {
                prefix += sv * sv;
                if prefix >= energy * total {
                    k = idx + 1;
                    break;
                }
            }
        } else {
            k = 1;
        }
        plan.set_rank(i, k);
    }
    Ok(plan)
}

/// Rewrite every planned convolution as `[V-conv, H-conv, BatchNorm]`. The
/// original bias attaches to the H output; BatchNorm starts at the identity
/// so the rewritten model approximates the original up to the truncation
/// error. Unplanned layers are copied verbatim.
pub fn rank_constrain_model(model: &Model, plan: &FactorizationPlan) -> Result<Model> {
    for (layer_idx, k) in plan.iter() {
        match model.layers.get(layer_idx) {
            Some(Layer::Conv2d { weight, .. }) => {
                let (c, d, n) = conv_kernel_dims(weight)?;
                if d == 1 {
                    return Err(Error::Parameter(format!(
                        "layer {layer_idx} is a 1x1 convolution and cannot be factorized"
                    )));
                }
                let max_rank = (c * d).min(d * n);
                if k == 0 || k > max_rank {
                    return Err(Error::Parameter(format!(
                        "plan rank {k} out of range [1, {max_rank}] for layer {layer_idx}"
                    )));
                }
            }
            Some(other) => {
                return Err(Error::Parameter(format!(
                    "plan references layer {layer_idx} which is {}, not conv2d",
                    other.kind_name()
                )));
            }
            None => {
                return Err(Error::Parameter(format!(
                    "plan references layer {layer_idx} but model has {} layers",
                    model.layers.len()
                )));
            }
        }
    }

    let mut layers = Vec::with_capacity(model.layers.len() + 2 * plan.len());
    for (i, layer) in model.layers.iter().enumerate() {
        match (layer, plan.rank_for(i)) {
            (Layer::Conv2d { weight, bias }, Some(k)) => {
                let pair = factorize_layer(weight, k)?;
                let v_bias = Tensor::zeros(&[k])?;
                layers.push(Layer::conv2d(pair.v_kernel, v_bias)?);
                layers.push(Layer::conv2d(pair.h_kernel, bias.clone())?);
                layers.push(Layer::BatchNorm(pair.h_batchnorm));
            }
            _ => layers.push(layer.clone()),
        }
    }
    let out = Model {
        layers,
        input_shape: model.input_shape,
        num_classes: model.num_classes,
    };
    out.validate()?;
    Ok(out)
}
