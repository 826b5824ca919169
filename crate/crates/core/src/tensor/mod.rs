//! Dense row-major `f32` tensors, the forward kernels used by the trainable
//! head, and a small reverse-mode tape ([`Graph`]) over those kernels.
//!
//! Reductions accumulate in `f64` in ascending index order and round once,
//! so results are bit-stable across runs and platforms.

mod graph;
pub mod gradcheck;

pub use graph::{Graph, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("expects {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        check_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "vector tensor must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::dim("item", &self.shape, &[1]));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(())
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape {
            shape: t.shape.clone(),
            reason: format!("{op} expects a rank-2 tensor"),
        }),
    }
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape {
            shape: t.shape.clone(),
            reason: format!("{op} expects a rank-3 tensor"),
        }),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a.data[i * k + p] as f64 * b.data[p * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "transpose")?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, m], out))
}

/// 1×1 convolution: `x[C_in×H×W]`, `w[C_out×C_in]`, `bias[C_out]`.
pub fn pointwise_conv(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, h, wd) = dims3(x, "pointwise_conv")?;
    let (c_out, w_in) = dims2(w, "pointwise_conv")?;
    if w_in != c_in {
        return Err(Error::dim("pointwise_conv", x.shape(), w.shape()));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim("pointwise_conv bias", w.shape(), bias.shape()));
    }
    let hw = h * wd;
    let mut out = vec![0.0f32; c_out * hw];
    for o in 0..c_out {
        for s in 0..hw {
            let mut acc = bias.data[o] as f64;
            for i in 0..c_in {
                acc += w.data[o * c_in + i] as f64 * x.data[i * hw + s] as f64;
            }
            out[o * hw + s] = acc as f32;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![c_out, h, wd], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| if v > 0.0 { v } else { 0.0 })
}

pub fn scale(x: &Tensor, factor: f32) -> Tensor {
    map(x, |v| v * factor)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, "sub", |x, y| x - y)
}

/// Mean over the spatial axes of a `C×H×W` tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "global_avg_pool")?;
    let hw = h * w;
    let out = (0..c)
        .map(|ch| (x.data[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Ok(Tensor::from_parts_unchecked(vec![c], out))
}

/// Sum of squared elements.
pub fn sum_squares(x: &Tensor) -> f32 {
    x.data.iter().map(|&v| v as f64 * v as f64).sum::<f64>() as f32
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_parts_unchecked(x.shape.clone(), x.data.iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), data))
}
