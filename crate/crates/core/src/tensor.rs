//! Dense row-major tensors and the handful of layer primitives the policy
//! network is built from. Every layer has an explicit forward and backward
//! function; there is no autodiff graph.
//!
//! All functions are generic over [`Scalar`] so the same code runs in `f32`
//! for production and in `f64` when checking gradients numerically.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};

use crate::error::{shape_err, Error, Result};

pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + Sum + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("zero dimension in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(!data.is_empty());
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| <U as NumCast>::from(v).expect("finite cast"))
                .collect(),
        }
    }

    fn expect_shape(&self, what: &str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return shape_err(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape
            ));
        }
        Ok(())
    }
}

/// Gradients returned by a layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T: Scalar = f32> {
    /// Same order and shapes as the layer's parameters (weights, then bias).
    pub parameter_grads: Vec<Tensor<T>>,
    pub input_grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Validates a valid-mode convolution and returns its geometry.
pub fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<ConvDims> {
    if input.ndim() != 3 {
        return shape_err(format!("conv input must be [C,H,W], got {:?}", input.shape));
    }
    if kernels.ndim() != 4 {
        return shape_err(format!(
            "conv kernels must be [C_out,C_in,kH,kW], got {:?}",
            kernels.shape
        ));
    }
    if stride == 0 {
        return Err(Error::Usage("stride must be positive".into()));
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kc != c_in {
        return shape_err(format!("kernel C_in {kc} != input channels {c_in}"));
    }
    if h < kh || w < kw {
        return shape_err(format!("input {h}x{w} smaller than kernel {kh}x{kw}"));
    }
    bias.expect_shape("conv bias", &[c_out])?;
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        out_h: (h - kh) / stride + 1,
        out_w: (w - kw) / stride + 1,
    })
}

/// Valid (unpadded) 2-D convolution. Each output is the kernel/window dot
/// product accumulated in kernel row-major order (channel, row, column),
/// then the bias is added.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernels, bias, stride)?;
    let x = &input.data;
    let k = &kernels.data;
    let mut out = vec![T::zero(); d.c_out * d.out_h * d.out_w];
    let k_per_out = d.c_in * d.kh * d.kw;
    for co in 0..d.c_out {
        let kbase = co * k_per_out;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let mut acc = T::zero();
                for ci in 0..d.c_in {
                    for ky in 0..d.kh {
                        let xrow = (ci * d.h + oy * stride + ky) * d.w + ox * stride;
                        let krow = kbase + (ci * d.kh + ky) * d.kw;
                        for kx in 0..d.kw {
                            acc = acc + k[krow + kx] * x[xrow + kx];
                        }
                    }
                }
                out[(co * d.out_h + oy) * d.out_w + ox] = acc + bias.data[co];
            }
        }
    }
    Tensor::new(vec![d.c_out, d.out_h, d.out_w], out)
}

/// Reverse pass of [`conv2d_forward`]: gradients w.r.t. kernels, bias and input.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    upstream: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (dk, db, dx) = conv2d_backward_impl(input, kernels, bias, stride, upstream, true)?;
    Ok(LayerGrads {
        parameter_grads: vec![dk, db],
        input_grad: dx.expect("input grad requested"),
    })
}

pub(crate) type ConvGrads<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

pub(crate) fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let d = conv_dims(input, kernels, bias, stride)?;
    upstream.expect_shape("conv upstream", &[d.c_out, d.out_h, d.out_w])?;
    let x = &input.data;
    let k = &kernels.data;
    let up = &upstream.data;
    let mut dk = vec![T::zero(); kernels.len()];
    let mut db = vec![T::zero(); d.c_out];
    let mut dx = if want_input {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let k_per_out = d.c_in * d.kh * d.kw;
    for co in 0..d.c_out {
        let kbase = co * k_per_out;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let g = up[(co * d.out_h + oy) * d.out_w + ox];
                db[co] = db[co] + g;
                if g == T::zero() {
                    continue;
                }
                for ci in 0..d.c_in {
                    for ky in 0..d.kh {
                        let xrow = (ci * d.h + oy * stride + ky) * d.w + ox * stride;
                        let krow = kbase + (ci * d.kh + ky) * d.kw;
                        let xs = &x[xrow..xrow + d.kw];
                        for (dkv, &xv) in dk[krow..krow + d.kw].iter_mut().zip(xs) {
                            *dkv = *dkv + g * xv;
                        }
                        if want_input {
                            let ks = &k[krow..krow + d.kw];
                            for (dxv, &kv) in dx[xrow..xrow + d.kw].iter_mut().zip(ks) {
                                *dxv = *dxv + g * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    let dk = Tensor::new(kernels.shape.clone(), dk)?;
    let db = Tensor::new(vec![d.c_out], db)?;
    let dx = if want_input {
        Some(Tensor::new(input.shape.clone(), dx)?)
    } else {
        None
    };
    Ok((dk, db, dx))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` through where `x > 0`, zero elsewhere.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.expect_shape("relu upstream", &x.shape)?;
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape.clone(), data)
}

fn dense_check<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize)> {
    if weights.ndim() != 2 {
        return shape_err(format!("dense weights must be [M,N], got {:?}", weights.shape));
    }
    let (m, n) = (weights.shape[0], weights.shape[1]);
    if x.len() != n {
        return shape_err(format!("dense input has {} values, weights expect {n}", x.len()));
    }
    Ok((m, n))
}

/// `y = W x + b`. The input may have any shape with N elements (it is
/// read as flattened row-major).
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, n) = dense_check(x, weights)?;
    bias.expect_shape("dense bias", &[m])?;
    let out = weights
        .data
        .chunks_exact(n)
        .zip(&bias.data)
        .map(|(row, &b)| {
            let mut acc = T::zero();
            for (&w, &xv) in row.iter().zip(&x.data) {
                acc = acc + w * xv;
            }
            acc + b
        })
        .collect();
    Tensor::new(vec![m], out)
}

/// Reverse pass of [`dense_forward`]. The input gradient takes the input's shape.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (dw, db, dx) = dense_backward_impl(x, weights, upstream, true)?;
    Ok(LayerGrads {
        parameter_grads: vec![dw, db],
        input_grad: dx.expect("input grad requested"),
    })
}

pub(crate) fn dense_backward_impl<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let (m, n) = dense_check(x, weights)?;
    upstream.expect_shape("dense upstream", &[m])?;
    let mut dw = vec![T::zero(); m * n];
    for (row, &g) in dw.chunks_exact_mut(n).zip(&upstream.data) {
        if g == T::zero() {
            continue;
        }
        for (d, &xv) in row.iter_mut().zip(&x.data) {
            *d = g * xv;
        }
    }
    let dx = if want_input {
        let mut dx = vec![T::zero(); n];
        for (row, &g) in weights.data.chunks_exact(n).zip(&upstream.data) {
            if g == T::zero() {
                continue;
            }
            for (d, &w) in dx.iter_mut().zip(row) {
                *d = *d + g * w;
            }
        }
        Some(Tensor::new(x.shape.clone(), dx)?)
    } else {
        None
    };
    Ok((
        Tensor::new(vec![m, n], dw)?,
        Tensor::new(vec![m], upstream.data.clone())?,
        dx,
    ))
}

/// Numerically stable softmax (max subtraction). Entries equal to negative
/// infinity receive probability exactly zero, which is how action masks are
/// expressed; at least one entry must be finite.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let max = logits.max();
    let exps: Vec<T> = logits
        .data
        .iter()
        .map(|&z| {
            if z == T::neg_infinity() {
                T::zero()
            } else {
                (z - max).exp()
            }
        })
        .collect();
    let total: T = exps.iter().copied().sum();
    Tensor {
        shape: logits.shape.clone(),
        data: exps.into_iter().map(|e| e / total).collect(),
    }
}

/// Bilinear resampling with corner-aligned sample positions: output pixel
/// `i` reads source coordinate `i * (h - 1) / (out_h - 1)`.
pub fn bilinear_upsample<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if map.ndim() != 2 {
        return shape_err(format!("upsample expects [h,w], got {:?}", map.shape));
    }
    let (h, w) = (map.shape[0], map.shape[1]);
    if out_h < h || out_w < w {
        return shape_err(format!("cannot upsample {h}x{w} down to {out_h}x{out_w}"));
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, T) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, T::zero());
        }
        let src = T::lit((i * (n_in - 1)) as f64) / T::lit((n_out - 1) as f64);
        let lo = src.floor().to_usize().unwrap_or(0).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - T::lit(lo as f64))
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = coord(j, w, out_w);
            let at = |y: usize, x: usize| map.data[y * w + x];
            let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
            let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}
