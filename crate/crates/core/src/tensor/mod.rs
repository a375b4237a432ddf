//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value: every operation returns a new tensor
//! and the backing buffer is shared behind an `Arc`, so clones are cheap and
//! tensors can be sent across threads freely. Differentiable evaluation lives
//! in [`crate::autodiff`], which calls the same kernels defined here.

mod conv;
mod kernels;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub(crate) use conv::conv2d_backward;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " {:?}..", &self.data[..PREVIEW])
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Self::from_parts(vec![n], data)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; n]))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "item() requires a single-element tensor".into(),
            })
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn mean_value(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn zip_broadcast(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            Ok(Self::from_parts(self.shape.clone(), data))
        } else if other.is_scalar() {
            let b = other.data[0];
            Ok(Self::from_parts(
                self.shape.clone(),
                self.data.iter().map(|&a| f(a, b)).collect(),
            ))
        } else if self.is_scalar() {
            let a = self.data[0];
            Ok(Self::from_parts(
                other.shape.clone(),
                other.data.iter().map(|&b| f(a, b)).collect(),
            ))
        } else {
            Err(Error::shape(op, &self.shape, &other.shape))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    /// `self + c * other` for equal shapes.
    pub fn axpy(&self, c: f64, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + c * b)
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    /// `x * sigmoid(x)`, a smooth ReLU substitute.
    pub fn silu(&self) -> Tensor {
        self.map(|v| v * sigmoid(v))
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(&v) = self.data.iter().find(|&&v| v < 0.0) {
            return Err(Error::NegativeSqrt(v));
        }
        Ok(self.map(f64::sqrt))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> Tensor {
        Self::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Tensor {
        Self::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.shape.len() || start >= end || end > self.shape[axis] {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("slice {start}..{end} on axis {axis} out of bounds"),
            });
        }
        let (outer, inner) = kernels::split_axis(&self.shape, axis);
        let len = self.shape[axis];
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenate along axis 0.
    pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "cannot concatenate zero tensors".into(),
        })?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("stack_rows", &first.shape, &p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose requires a 2-D tensor".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], data))
    }

    /// Stride-1, zero-padded ("same") 2-D convolution.
    ///
    /// `self`: `[N, C, H, W]`, `weight`: `[O, C, k, k]` with odd `k`, `bias`: `[O]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        conv::conv2d(self, weight, bias)
    }

    /// 2x2 average pooling over the trailing two axes of an `[N, C, H, W]` tensor.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let [n, c, h, w] = kernels::dims4(self, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "avg_pool2 needs even spatial dims".into(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let a = src[2 * i * w + 2 * j];
                    let b = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * wo + j] = 0.25 * (a + b + cc + d);
                }
            }
        }
        Ok(Self::from_parts(vec![n, c, ho, wo], out))
    }

    /// Nearest-neighbour 2x upsampling of an `[N, C, H, W]` tensor.
    pub fn upsample2(&self) -> Result<Tensor> {
        let [n, c, h, w] = kernels::dims4(self, "upsample2")?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        Ok(Self::from_parts(vec![n, c, ho, wo], out))
    }

    /// `x * scale + shift` with `scale`, `shift` of shape `[N, C]` broadcast
    /// over the spatial axes of `x: [N, C, H, W]`.
    pub fn channel_affine(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = kernels::dims4(self, "channel_affine")?;
        if scale.shape != [n, c] {
            return Err(Error::shape("channel_affine", &self.shape, &scale.shape));
        }
        if shift.shape != [n, c] {
            return Err(Error::shape("channel_affine", &self.shape, &shift.shape));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(self.numel());
        for p in 0..n * c {
            let (s, b) = (scale.data[p], shift.data[p]);
            out.extend(self.data[p * hw..(p + 1) * hw].iter().map(|&v| v * s + b));
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Add a per-row vector `[K]` to every row of a `[R, K]` matrix.
    pub fn add_row_vector(&self, row: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || row.numel() != self.shape[1] {
            return Err(Error::shape("add_row_vector", &self.shape, &row.shape));
        }
        let k = self.shape[1];
        let mut out = self.data.to_vec();
        for chunk in out.chunks_mut(k) {
            for (v, &b) in chunk.iter_mut().zip(row.data.iter()) {
                *v += b;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// L2-normalise each row of a `[R, K]` matrix: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (_, k) = kernels::dims2(self, "l2_normalize_rows")?;
        let mut out = self.data.to_vec();
        for row in out.chunks_mut(k) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Channel-wise L2 normalisation of `[N, C, H, W]`: each `(n, c)` map is
    /// normalised over its spatial positions.
    pub fn l2_normalize_channels(&self, eps: f64) -> Result<Tensor> {
        let [n, c, h, w] = kernels::dims4(self, "l2_normalize_channels")?;
        self.reshape(&[n * c, h * w])?
            .l2_normalize_rows(eps)?
            .reshape(&[n, c, h, w])
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (_, k) = kernels::dims2(self, "log_softmax_rows")?;
        let mut out = self.data.to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
