//! Layer primitives with exact backward passes. Every op works on a single
//! sample; batching is done by the training loops.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

fn im2col<T: Scalar>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * kh * kw * p];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ch * kh + dy) * kw + dx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let p = oh * ow;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ch * kh + dy) * kw + dx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2-D convolution of a `[C,H,W]` input with `[F,C,kh,kw]` weights.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (c, h, w) = input.dims3()?;
    let [f, wc, kh, kw] = weights.shape()[..] else {
        return Err(Error::Shape(format!(
            "conv weights must be [F,C,kh,kw], got {:?}",
            weights.shape()
        )));
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "conv input has {c} channels but weights expect {wc}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::Shape(format!(
            "conv bias must be [{f}], got {:?}",
            bias.shape()
        )));
    }
    let (Some(oh), Some(ow)) = (
        conv_output_len(h, kh, stride, pad),
        conv_output_len(w, kw, stride, pad),
    ) else {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {h}x{w}"
        )));
    };
    let cols = im2col(input.data(), (c, h, w), (kh, kw), (oh, ow), stride, pad);
    let p = oh * ow;
    let k = c * kh * kw;
    let mut out = vec![T::zero(); f * p];
    for (row, &b) in out.chunks_mut(p).zip(bias.data()) {
        row.iter_mut().for_each(|v| *v = b);
    }
    T::gemm(false, false, f, p, k, T::one(), weights.data(), &cols, T::one(), &mut out);
    let cache = ConvCache {
        cols,
        in_shape: (c, h, w),
        out_hw: (oh, ow),
        kernel: (kh, kw),
        stride,
        pad,
    };
    Ok((Tensor::new(vec![f, oh, ow], out)?, cache))
}

pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (c, h, w) = cache.in_shape;
    let (oh, ow) = cache.out_hw;
    let (kh, kw) = cache.kernel;
    let f = weights.shape()[0];
    if grad_out.shape() != [f, oh, ow] {
        return Err(Error::Shape(format!(
            "conv grad must be [{f},{oh},{ow}], got {:?}",
            grad_out.shape()
        )));
    }
    let p = oh * ow;
    let k = c * kh * kw;
    let g = grad_out.data();

    let mut dw = vec![T::zero(); f * k];
    T::gemm(false, true, f, k, p, T::one(), g, &cache.cols, T::zero(), &mut dw);
    let db: Vec<T> = g.chunks(p).map(|row| row.iter().copied().sum()).collect();
    let mut dcols = vec![T::zero(); k * p];
    T::gemm(true, false, k, p, f, T::one(), weights.data(), g, T::zero(), &mut dcols);
    let dx = col2im(&dcols, (c, h, w), (kh, kw), (oh, ow), cache.stride, cache.pad);

    Ok(ConvGrads {
        input: Tensor::new(vec![c, h, w], dx)?,
        weights: Tensor::new(weights.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![f], db)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape("relu gradient shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    /// Flat input index that won each output cell.
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache)> {
    let (c, h, w) = x.dims3()?;
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return Err(Error::Shape(format!(
            "pool window {kernel} (stride {stride}) does not fit {h}x{w}"
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * stride * w + ox * stride;
                for dy in 0..kernel {
                    let row = ch * h * w + (oy * stride + dy) * w + ox * stride;
                    for idx in row..row + kernel {
                        // strict comparison keeps the first row-major maximum
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    let cache = PoolCache {
        argmax,
        in_shape: vec![c, h, w],
    };
    Ok((Tensor::new(vec![c, oh, ow], out)?, cache))
}

pub fn maxpool2d_backward<T: Scalar>(cache: &PoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::Shape("maxpool gradient shape mismatch".into()));
    }
    let mut dx = Tensor::zeros(&cache.in_shape);
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

#[derive(Debug, Clone)]
pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn fc_dims<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let [m, n] = weights.shape()[..] else {
        return Err(Error::Shape(format!(
            "fc weights must be [m,n], got {:?}",
            weights.shape()
        )));
    };
    if x.len() != n {
        return Err(Error::Shape(format!(
            "fc layer expects {n} inputs, got {}",
            x.len()
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::Shape(format!("fc bias must be [{m}]")));
    }
    Ok((m, n))
}

/// `W x + b`; the input is flattened, whatever its shape.
pub fn fully_connected<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, n) = fc_dims(x, weights, bias)?;
    let mut out = bias.data().to_vec();
    T::gemm(false, false, m, 1, n, T::one(), weights.data(), x.data(), T::one(), &mut out);
    Tensor::new(vec![m], out)
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let [m, n] = weights.shape()[..] else {
        return Err(Error::Shape("fc weights must be 2-D".into()));
    };
    if grad_out.len() != m || x.len() != n {
        return Err(Error::Shape("fc gradient shape mismatch".into()));
    }
    let g = grad_out.data();
    let mut dx = vec![T::zero(); n];
    T::gemm(true, false, n, 1, m, T::one(), weights.data(), g, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); m * n];
    T::gemm(false, false, m, n, 1, T::one(), g, x.data(), T::zero(), &mut dw);
    Ok(FcGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weights: Tensor::new(vec![m, n], dw)?,
        bias: Tensor::new(vec![m], g.to_vec())?,
    })
}

/// Inverted dropout. Returns the output and, in train mode, the per-element
/// multiplier (0 or `1/(1-ratio)`) that the backward pass reuses.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    ratio: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "dropout ratio {ratio} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || ratio == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - ratio));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < ratio {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(mask) => {
            if mask.len() != grad_out.len() {
                return Err(Error::Shape("dropout mask length mismatch".into()));
            }
            let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
            Tensor::new(grad_out.shape().to_vec(), data)
        }
    }
}

/// Numerically stable softmax over all entries of `x`.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let max = x
        .data()
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = x.data().iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let data = exps.into_iter().map(|e| e / total).collect();
    Tensor::new(x.shape().to_vec(), data).expect("softmax preserves shape")
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::Shape("softmax gradient shape mismatch".into()));
    }
    let dot: T = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&a, &b)| a * b)
        .sum();
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&yi, &gi)| yi * (gi - dot))
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}
