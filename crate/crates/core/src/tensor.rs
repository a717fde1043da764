//! Dense row-major tensors and the plain (non-differentiable) kernels the
//! autodiff tape is built on.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, shape_err, Error, Result};
use crate::par;

/// Work threshold (multiply-adds) above which matmul splits rows across threads.
const PAR_MATMUL_WORK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            shape_err!("every dimension must be >= 1, got {shape:?}")
        );
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            shape_err!("shape {shape:?} needs {n} elements, got {}", data.len())
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized dim in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), shape_err!("no rows"));
        let cols = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            shape_err!("ragged rows")
        );
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples i.i.d. `Normal(0, std)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and >= 0");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows when viewed as a matrix `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.numel() && shape.iter().all(|&d| d >= 1),
            shape_err!("cannot reshape {:?} to {shape:?}", self.shape)
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Size in bytes of the scalar payload.
    pub fn nbytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            shape_err!("elementwise op on {:?} and {:?}", self.shape, other.shape)
        );
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            shape_err!("accumulate {:?} into {:?}", other.shape, self.shape)
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Result<Self> {
        ensure!(self.ndim() == 2, shape_err!("transpose needs 2-D, got {:?}", self.shape));
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(&[n, m], out)
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.cols();
        ensure!(
            len >= 1 && start + len <= self.rows(),
            shape_err!("row slice {start}+{len} out of {}", self.rows())
        );
        Self::new(&[len, c], self.data[start * c..(start + len) * c].to_vec())
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    ensure!(
        t.ndim() == 2,
        shape_err!("{what} must be 2-D, got {:?}", t.shape())
    );
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    ensure!(
        k == k2,
        shape_err!("matmul inner dims differ: {m}x{k} · {k2}x{n}")
    );
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    let kernel = |i: usize, row: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_WORK && m > 1 {
        par::for_each_row(&mut out, n, kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
    }
    Tensor::new(&[m, n], out)
}

/// Sequential reference of [`matmul`], kept for benchmarking the row-parallel path.
pub fn matmul_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    ensure!(k == k2, shape_err!("matmul inner dims differ"));
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = matrix_dims(a, "matmul_nt lhs")?;
    let (_, k2) = matrix_dims(b, "matmul_nt rhs")?;
    ensure!(k == k2, shape_err!("matmul_nt inner dims differ: {k} vs {k2}"));
    // an explicit transpose lets the row kernel vectorize over the output
    matmul(a, &b.transpose()?)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = matrix_dims(a, "matmul_tn lhs")?;
    let (k2, n) = matrix_dims(b, "matmul_tn rhs")?;
    ensure!(k == k2, shape_err!("matmul_tn inner dims differ: {k} vs {k2}"));
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    let kernel = |i: usize, row: &mut [f64]| {
        for p in 0..k {
            let av = ad[p * m + i];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_WORK && m > 1 {
        par::for_each_row(&mut out, n, kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
    }
    Tensor::new(&[m, n], out)
}

/// Row-wise softmax over the last dimension. Max-subtraction keeps `exp` in range.
pub fn softmax(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

/// Row-wise `log(softmax(x))`, computed via log-sum-exp.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalized activations plus the per-row statistics needed for the backward pass.
pub(crate) struct LayerNormParts {
    pub out: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<LayerNormParts> {
    let h = x.cols();
    ensure!(
        gain.numel() == h && bias.numel() == h,
        shape_err!("layer_norm: last dim {h}, gain {:?}, bias {:?}", gain.shape(), bias.shape())
    );
    ensure!(eps > 0.0, Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
    let rows = x.rows();
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xs = x.row(r);
        let mean = xs.iter().sum::<f64>() / h as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..h {
            let n = (xs[j] - mean) * is;
            xhat[r * h + j] = n;
            out[r * h + j] = n * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormParts {
        out: Tensor::new(x.shape(), out)?,
        xhat,
        inv_std,
    })
}

/// Per-vector zero-mean / unit-variance normalization over the last dim, then `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gain, bias, eps)?.out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Complex tensor stored as split real/imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            !shape.is_empty() && n >= 1 && re.len() == n && im.len() == n,
            shape_err!("complex tensor {shape:?} with {} re / {} im", re.len(), im.len())
        );
        Ok(Self {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn from_real(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            re: t.data().to_vec(),
            im: vec![0.0; t.numel()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn real(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.re.clone(),
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }
}
