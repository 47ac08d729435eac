//! Layer primitives as explicit forward/backward function pairs.
//!
//! Backward functions take the forward inputs (not cached activations) plus
//! the upstream gradient, so every pair is a pure function of its arguments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{LayerGrad, Tensor};

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `out[n, j] = sum_i input[n, i] * weight[i, j] + bias[j]`.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d, m) = affine_dims(input, weight, bias)?;
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * m);
    for row in x.chunks_exact(d) {
        let mut acc = bias.data().to_vec();
        for (xi, wrow) in row.iter().zip(w.chunks_exact(m)) {
            if *xi == 0.0 {
                continue;
            }
            for (a, wij) in acc.iter_mut().zip(wrow) {
                *a += xi * wij;
            }
        }
        out.extend_from_slice(&acc);
    }
    Tensor::new(vec![n, m], out)
}

/// Gradients of `affine`; `d_params` is `[d_weight, d_bias]`.
pub fn affine_backward(input: &Tensor, weight: &Tensor, d_out: &Tensor) -> Result<LayerGrad> {
    expect_rank(input, 2, "affine input")?;
    expect_rank(weight, 2, "affine weight")?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[1];
    if weight.shape()[0] != d || d_out.shape() != [n, m] {
        return Err(Error::dim(format!(
            "affine backward: input {:?}, weight {:?}, d_out {:?}",
            input.shape(),
            weight.shape(),
            d_out.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let g = d_out.data();
    let mut d_in = vec![0.0; n * d];
    let mut d_w = vec![0.0; d * m];
    let mut d_b = vec![0.0; m];
    for ((xrow, grow), dxrow) in x.chunks_exact(d).zip(g.chunks_exact(m)).zip(d_in.chunks_exact_mut(d)) {
        for (b, gj) in d_b.iter_mut().zip(grow) {
            *b += gj;
        }
        for (i, (xi, wrow)) in xrow.iter().zip(w.chunks_exact(m)).enumerate() {
            dxrow[i] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
            if *xi == 0.0 {
                continue;
            }
            for (dw, gj) in d_w[i * m..(i + 1) * m].iter_mut().zip(grow) {
                *dw += xi * gj;
            }
        }
    }
    Ok(LayerGrad {
        d_input: Tensor::new(vec![n, d], d_in)?,
        d_params: vec![Tensor::new(vec![d, m], d_w)?, Tensor::new(vec![m], d_b)?],
    })
}

fn affine_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank(input, 2, "affine input")?;
    expect_rank(weight, 2, "affine weight")?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[1];
    if weight.shape()[0] != d {
        return Err(Error::dim(format!(
            "affine input {:?} does not match weight {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::dim(format!(
            "affine bias {:?} does not match weight {:?}",
            bias.shape(),
            weight.shape()
        )));
    }
    Ok((n, d, m))
}

/// Output extent of a convolution or pooling window sweep.
pub fn conv_output_size(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Parameter("stride must be at least 1".into()));
    }
    if kernel == 0 || kernel > len + 2 * pad {
        return Err(Error::dim(format!(
            "kernel {kernel} larger than padded extent {len}+2*{pad}"
        )));
    }
    Ok((len + 2 * pad - kernel) / stride + 1)
}

/// Range of output positions whose tap at offset `k` lands inside the input.
fn valid_outputs(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let (k, pad, stride) = (k as isize, pad as isize, stride as isize);
    // in = out * stride + k - pad must satisfy 0 <= in < in_len
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let hi_in = in_len as isize - 1 + pad - k;
    let hi = if hi_in < 0 { 0 } else { hi_in / stride + 1 };
    let lo = lo.min(out_len as isize) as usize;
    let hi = (hi.min(out_len as isize) as usize).max(lo);
    (lo, hi)
}

struct ConvGeometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeometry> {
    expect_rank(input, 4, "conv2d input")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    let &[n, c_in, h, w] = input.shape() else {
        unreachable!()
    };
    let &[c_out, kc, kh, kw] = kernel.shape() else {
        unreachable!()
    };
    if kc != c_in || kh != kw {
        return Err(Error::dim(format!(
            "conv2d kernel {:?} incompatible with input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    let ho = conv_output_size(h, kh, stride, pad)?;
    let wo = conv_output_size(w, kw, stride, pad)?;
    Ok(ConvGeometry {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        ho,
        wo,
    })
}

/// Zero-padded cross-correlation.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride, pad)?;
    let x = input.data();
    let kd = kernel.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.c_out * plane_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let o_base = (n * g.c_out + co) * plane_out;
            let o_plane = &mut out[o_base..o_base + plane_out];
            for ci in 0..g.c_in {
                let i_base = (n * g.c_in + ci) * plane_in;
                let i_plane = &x[i_base..i_base + plane_in];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_outputs(ky, pad, stride, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = kd[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_outputs(kx, pad, stride, g.w, g.wo);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let o_row = &mut o_plane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                            let ix0 = ox_lo * stride + kx - pad;
                            let i_row = &i_plane[iy * g.w..(iy + 1) * g.w];
                            if stride == 1 {
                                for (o, i) in o_row.iter_mut().zip(&i_row[ix0..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (o, i) in o_row.iter_mut().zip(i_row[ix0..].iter().step_by(stride)) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.c_out, g.ho, g.wo], out)
}

/// Gradients of `conv2d`; `d_params` is `[d_kernel]`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    d_out: &Tensor,
) -> Result<LayerGrad> {
    let g = conv_geometry(input, kernel, stride, pad)?;
    if d_out.shape() != [g.n, g.c_out, g.ho, g.wo] {
        return Err(Error::dim(format!(
            "conv2d d_out {:?} does not match output [{}, {}, {}, {}]",
            d_out.shape(),
            g.n,
            g.c_out,
            g.ho,
            g.wo
        )));
    }
    let x = input.data();
    let kd = kernel.data();
    let gd = d_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut d_in = vec![0.0; x.len()];
    let mut d_k = vec![0.0; kd.len()];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let o_base = (n * g.c_out + co) * plane_out;
            let g_plane = &gd[o_base..o_base + plane_out];
            for ci in 0..g.c_in {
                let i_base = (n * g.c_in + ci) * plane_in;
                let i_plane = &x[i_base..i_base + plane_in];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_outputs(ky, pad, stride, g.h, g.ho);
                    for kx in 0..g.k {
                        let k_idx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                        let wv = kd[k_idx];
                        let (ox_lo, ox_hi) = valid_outputs(kx, pad, stride, g.w, g.wo);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let ix0 = ox_lo * stride + kx - pad;
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let g_row = &g_plane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                            let row_start = i_base + iy * g.w;
                            let i_row = &i_plane[iy * g.w..(iy + 1) * g.w];
                            let d_row = &mut d_in[row_start..row_start + g.w];
                            if stride == 1 {
                                for ((gv, iv), dv) in g_row.iter().zip(&i_row[ix0..]).zip(&mut d_row[ix0..]) {
                                    acc += gv * iv;
                                    *dv += wv * gv;
                                }
                            } else {
                                for (j, gv) in g_row.iter().enumerate() {
                                    let ix = ix0 + j * stride;
                                    acc += gv * i_row[ix];
                                    d_row[ix] += wv * gv;
                                }
                            }
                        }
                        d_k[k_idx] += acc;
                    }
                }
            }
        }
    }
    Ok(LayerGrad {
        d_input: Tensor::new(input.shape().to_vec(), d_in)?,
        d_params: vec![Tensor::new(kernel.shape().to_vec(), d_k)?],
    })
}

fn pool_geometry(input: &Tensor, window: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    expect_rank(input, 4, "maxpool2d input")?;
    let &[n, c, h, w] = input.shape() else { unreachable!() };
    if window == 0 || window > h || window > w {
        return Err(Error::dim(format!(
            "pooling window {window} exceeds spatial extent {h}x{w}"
        )));
    }
    let ho = conv_output_size(h, window, stride, 0)?;
    let wo = conv_output_size(w, window, stride, 0)?;
    Ok((n * c, h, w, ho, wo, window))
}

/// Flat input index of each window's maximum; first index wins ties.
fn pool_argmax(input: &Tensor, window: usize, stride: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (planes, h, w, ho, wo, win) = pool_geometry(input, window, stride)?;
    let x = input.data();
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..win {
                    for dx in 0..win {
                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[2] = ho;
    shape[3] = wo;
    Ok((idx, shape))
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (idx, shape) = pool_argmax(input, window, stride)?;
    let x = input.data();
    Tensor::new(shape, idx.iter().map(|&i| x[i]).collect())
}

/// Routes each output gradient to its window's argmax.
pub fn maxpool2d_backward(input: &Tensor, window: usize, stride: usize, d_out: &Tensor) -> Result<Tensor> {
    let (idx, shape) = pool_argmax(input, window, stride)?;
    if d_out.shape() != shape.as_slice() {
        return Err(Error::dim(format!(
            "maxpool d_out {:?} does not match output {shape:?}",
            d_out.shape()
        )));
    }
    let mut d_in = Tensor::zeros(input.shape());
    let d = d_in.data_mut();
    for (&i, g) in idx.iter().zip(d_out.data()) {
        d[i] += g;
    }
    Ok(d_in)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Subgradient at zero is zero.
pub fn relu_backward(input: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    if !input.same_shape(d_out) {
        return Err(Error::dim(format!(
            "relu input {:?} vs d_out {:?}",
            input.shape(),
            d_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Logistic function, branching on sign so `exp` never overflows.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

/// Takes the forward *output*: `d_in = d_out * s * (1 - s)`.
pub fn sigmoid_backward(output: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    if !output.same_shape(d_out) {
        return Err(Error::dim(format!(
            "sigmoid output {:?} vs d_out {:?}",
            output.shape(),
            d_out.shape()
        )));
    }
    let data = output
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Inverted-dropout multipliers: `0` or `1 / (1 - rate)` per element.
pub fn dropout_mask(shape: &[usize], rate: f64, training: bool, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(Tensor::full(shape, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Tensor::zeros(shape);
    for m in mask.data_mut() {
        *m = if rng.random::<f64>() < rate { 0.0 } else { keep };
    }
    Ok(mask)
}

pub fn dropout(input: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
    let mask = dropout_mask(input.shape(), rate, training, seed)?;
    apply_mask(input, &mask)
}

/// Regenerates the forward mask from the same seed.
pub fn dropout_backward(d_out: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
    let mask = dropout_mask(d_out.shape(), rate, training, seed)?;
    apply_mask(d_out, &mask)
}

fn apply_mask(t: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let data = t.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Tensor::new(t.shape().to_vec(), data)
}
