//! Direct 2-D convolution kernels (cross-correlation, stride 1, zero padding
//! of floor(k/2) per axis so odd kernels preserve spatial size).
//!
//! Weights are stored `(in_channels, kh, kw, out_channels)` to match the rest
//! of the crate; the kernels repack to `(out, in, kh, kw)` internally so the
//! innermost loops run over contiguous rows. Summation order is fixed, so
//! outputs are bit-reproducible.

/// Static shape description for one convolution application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn pad(&self) -> (usize, usize) {
        (self.kh / 2, self.kw / 2)
    }

    /// Output spatial extents for stride 1: `dim + 2*pad - k + 1`.
    pub fn out_hw(&self) -> (usize, usize) {
        let (ph, pw) = self.pad();
        (self.h + 2 * ph + 1 - self.kh, self.w + 2 * pw + 1 - self.kw)
    }
}

/// Valid output-row range for a kernel offset: `oy` such that
/// `iy = oy + dy - pad` lands inside `[0, in_dim)`.
fn valid_range(out_dim: usize, in_dim: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset);
    let hi = (in_dim + pad - offset).min(out_dim);
    (lo, hi.max(lo))
}

fn repack_weight(weight: &[f64], d: &ConvDims) -> Vec<f64> {
    // (c, dy, dx, n) -> (n, c, dy, dx)
    let mut out = vec![0.0; weight.len()];
    for c in 0..d.in_ch {
        for dy in 0..d.kh {
            for dx in 0..d.kw {
                for n in 0..d.out_ch {
                    out[((n * d.in_ch + c) * d.kh + dy) * d.kw + dx] =
                        weight[((c * d.kh + dy) * d.kw + dx) * d.out_ch + n];
                }
            }
        }
    }
    out
}

pub(crate) fn forward(input: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let (ph, pw) = d.pad();
    let (oh, ow) = d.out_hw();
    let wk = repack_weight(weight, d);
    let mut out = vec![0.0; d.batch * d.out_ch * oh * ow];
    for b in 0..d.batch {
        for n in 0..d.out_ch {
            let plane = &mut out[(b * d.out_ch + n) * oh * ow..][..oh * ow];
            plane.fill(bias[n]);
            for c in 0..d.in_ch {
                let in_plane = &input[(b * d.in_ch + c) * d.h * d.w..][..d.h * d.w];
                for dy in 0..d.kh {
                    let (ylo, yhi) = valid_range(oh, d.h, dy, ph);
                    for dx in 0..d.kw {
                        let wv = wk[((n * d.in_ch + c) * d.kh + dy) * d.kw + dx];
                        if wv == 0.0 {
                            continue; // pruned taps contribute nothing
                        }
                        let (xlo, xhi) = valid_range(ow, d.w, dx, pw);
                        if xhi == xlo {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy + dy - ph;
                            let src = &in_plane[iy * d.w + (xlo + dx - pw)..][..xhi - xlo];
                            let dst = &mut plane[oy * ow + xlo..][..xhi - xlo];
                            for (o, &s) in dst.iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of the convolution. Returns `(grad_input, grad_weight,
/// grad_bias)` with `grad_weight` in the `(c, dy, dx, n)` layout of the
/// stored weight.
pub(crate) fn backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ph, pw) = d.pad();
    let (oh, ow) = d.out_hw();
    let wk = repack_weight(weight, d);
    let mut gin = vec![0.0; d.batch * d.in_ch * d.h * d.w];
    let mut gw_packed = vec![0.0; weight.len()]; // (n, c, dy, dx)
    let mut gbias = vec![0.0; d.out_ch];

    for b in 0..d.batch {
        for n in 0..d.out_ch {
            let gout_plane = &grad_out[(b * d.out_ch + n) * oh * ow..][..oh * ow];
            gbias[n] += gout_plane.iter().sum::<f64>();
            for c in 0..d.in_ch {
                let in_plane = &input[(b * d.in_ch + c) * d.h * d.w..][..d.h * d.w];
                let gin_plane = &mut gin[(b * d.in_ch + c) * d.h * d.w..][..d.h * d.w];
                for dy in 0..d.kh {
                    let (ylo, yhi) = valid_range(oh, d.h, dy, ph);
                    for dx in 0..d.kw {
                        let (xlo, xhi) = valid_range(ow, d.w, dx, pw);
                        if xhi == xlo {
                            continue;
                        }
                        let widx = ((n * d.in_ch + c) * d.kh + dy) * d.kw + dx;
                        let wv = wk[widx];
                        let mut gw_acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy + dy - ph;
                            let ix0 = xlo + dx - pw;
                            let len = xhi - xlo;
                            let src = &in_plane[iy * d.w + ix0..][..len];
                            let gout_row = &gout_plane[oy * ow + xlo..][..len];
                            let gin_row = &mut gin_plane[iy * d.w + ix0..][..len];
                            let mut dot = 0.0;
                            for ((gi, &go), &x) in gin_row.iter_mut().zip(gout_row).zip(src) {
                                dot += x * go;
                                *gi += wv * go;
                            }
                            gw_acc += dot;
                        }
                        gw_packed[widx] += gw_acc;
                    }
                }
            }
        }
    }

    // (n, c, dy, dx) -> (c, dy, dx, n)
    let mut gw = vec![0.0; weight.len()];
    for n in 0..d.out_ch {
        for c in 0..d.in_ch {
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    gw[((c * d.kh + dy) * d.kw + dx) * d.out_ch + n] =
                        gw_packed[((n * d.in_ch + c) * d.kh + dy) * d.kw + dx];
                }
            }
        }
    }
    (gin, gw, gbias)
}
