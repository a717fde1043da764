//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] only has to walk it in reverse.
//!
//! Parameters are borrowed from a [`ParamStore`] rather than copied onto the
//! tape. The tape also counts forward FLOPs of matrix products and Fourier
//! transforms (see [`FlopCounter`]), which the benchmark harness uses as an
//! exact, timing-independent cost measure.

use std::collections::HashMap;

use crate::backbone::fourier::{ft_layer_flops, ft_real_2d, wft_layer_flops, wft_raw, WindowGrid};
use crate::error::{ensure, shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, gelu, gelu_grad, Tensor, LAYER_NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Forward-pass FLOPs of matrix products and Fourier transforms.
///
/// A matrix product `[m×k]·[k×n]` counts `mkn` multiplications and `mkn`
/// additions. Elementwise work (norms, activations, masks) is not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub mul: u64,
    pub add: u64,
}

/// FLOP counting convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Convention {
    /// Multiplications and additions.
    Fusion,
    /// Multiplications only.
    Backbone,
}

impl FlopCounter {
    pub fn total(&self, convention: Convention) -> u64 {
        match convention {
            Convention::Fusion => self.mul + self.add,
            Convention::Backbone => self.mul,
        }
    }

    pub fn matmul(m: usize, k: usize, n: usize) -> Self {
        let c = (m * k * n) as u64;
        Self { mul: c, add: c }
    }
}

impl std::ops::Add for FlopCounter {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            mul: self.mul + o.mul,
            add: self.add + o.add,
        }
    }
}

impl std::ops::AddAssign for FlopCounter {
    fn add_assign(&mut self, o: Self) {
        self.mul += o.mul;
        self.add += o.add;
    }
}

impl std::ops::Mul<u64> for FlopCounter {
    type Output = Self;
    fn mul(self, k: u64) -> Self {
        Self {
            mul: self.mul * k,
            add: self.add * k,
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Ft(Var),
    Wft(Var, WindowGrid),
}

struct Node {
    value: Option<Tensor>,
    param: Option<ParamId>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    flops: FlopCounter,
}

impl<'p> Tape<'p> {
    /// A tape that records operations for differentiation.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::build(Some(store), true)
    }

    /// A forward-only tape: no gradients, no saved intermediates.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::build(Some(store), false)
    }

    /// A recording tape without parameters, for free-standing tensor graphs.
    pub fn detached() -> Tape<'static> {
        Tape::build(None, true)
    }

    fn build(store: Option<&'p ParamStore>, grad_enabled: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled,
            flops: FlopCounter::default(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node values created on this tape (parameters excluded).
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.value.as_ref())
            .map(Tensor::nbytes)
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(id)) => self.store.expect("param node without store").get(id),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter `id` of the bound store. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Param,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        self.flops += FlopCounter::matmul(m, k, out.shape()[1]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        self.flops += FlopCounter::matmul(m, k, out.shape()[1]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(a).zip_map(c, |x, y| x * y)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c.clone()), rg))
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        ensure!(
            bv.numel() == n,
            shape_err!("bias {:?} does not match rows of {:?}", bv.shape(), xv.shape())
        );
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let parts = tensor::layer_norm_parts(
            self.value(x),
            self.value(gain),
            self.value(bias),
            LAYER_NORM_EPS,
        )?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let (xhat, inv_std) = if rg && self.grad_enabled {
            (parts.xhat, parts.inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            parts.out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = tensor::softmax(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = tensor::log_softmax(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `out.flat[j] = x.flat[idx[j]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            idx.iter().all(|&i| i < xv.numel()),
            shape_err!("gather index out of range for {:?}", xv.shape())
        );
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, idx }, rg))
    }

    /// Rows `rows` of a matrix, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        ensure!(
            !rows.is_empty() && rows.iter().all(|&i| i < r),
            shape_err!("row selection out of range for {r} rows")
        );
        let idx = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(x, idx, &[rows.len(), c])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.ndim() == 2, shape_err!("slice_cols expects 2-D"));
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        ensure!(
            len >= 1 && start + len <= n,
            shape_err!("column slice {start}+{len} out of {n}")
        );
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(&[m, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), shape_err!("concat of nothing"));
        let m = self.value(parts[0]).rows();
        ensure!(
            parts.iter().all(|&p| self.value(p).ndim() == 2 && self.value(p).rows() == m),
            shape_err!("concat_cols needs equal row counts")
        );
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Fourier token mixing over a `[T×H]` sequence.
    pub fn ft(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.ndim() == 2, shape_err!("ft expects [T×H], got {:?}", xv.shape()));
        let (t, h) = (xv.shape()[0], xv.shape()[1]);
        let out = Tensor::new(&[t, h], ft_real_2d(xv.data(), t, h))?;
        let (m, a) = ft_layer_flops(t, h);
        self.flops += FlopCounter { mul: m, add: a };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Ft(x), rg))
    }

    /// Windowed Fourier mixing over tokens `[(H·W)×C]` laid out row-major on `grid`.
    pub fn wft(&mut self, x: Var, grid: &WindowGrid) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            xv.shape() == [grid.map_h * grid.map_w, grid.channels],
            shape_err!("wft tokens {:?} do not match grid", xv.shape())
        );
        let out = Tensor::new(xv.shape(), wft_raw(xv.data(), grid))?;
        let (m, a) = wft_layer_flops(grid);
        self.flops += FlopCounter { mul: m, add: a };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Wft(x, grid.clone()), rg))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        ensure!(
            self.value(loss).numel() == 1,
            Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ))
        );
        ensure!(
            self.grad_enabled,
            Error::Contract("backward on an inference tape".into())
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = self.value(Var(i));
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, tensor::matmul_nt(g, self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accum(grads, *b, tensor::matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, tensor::matmul(g, self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accum(grads, *b, tensor::matmul_tn(g, self.value(*a))?)?;
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.rg(*b) {
                    self.accum(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.scale(*s))?,
            Op::MulConst(a, c) => self.accum(grads, *a, g.zip_map(c, |x, y| x * y)?)?,
            Op::AddRow(x, b) => {
                self.accum(grads, *x, g.clone())?;
                if self.rg(*b) {
                    let n = g.cols();
                    let mut col = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (c, v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    self.accum(grads, *b, Tensor::new(self.shape(*b), col)?)?;
                }
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv))?;
                self.accum(grads, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let h = g.cols();
                let gamma = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut gg = vec![0.0; h];
                    let mut gb = vec![0.0; h];
                    for (r, row) in g.data().chunks(h).enumerate() {
                        for j in 0..h {
                            gg[j] += row[j] * xhat[r * h + j];
                            gb[j] += row[j];
                        }
                    }
                    self.accum(grads, *gain, Tensor::new(self.shape(*gain), gg)?)?;
                    self.accum(grads, *bias, Tensor::new(self.shape(*bias), gb)?)?;
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.numel()];
                    let hf = h as f64;
                    for (r, row) in g.data().chunks(h).enumerate() {
                        let xh = &xhat[r * h..(r + 1) * h];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..h {
                            let d = row[j] * gamma[j];
                            s1 += d;
                            s2 += d * xh[j];
                        }
                        for j in 0..h {
                            let d = row[j] * gamma[j];
                            gx[r * h + j] = inv_std[r] / hf * (hf * d - s1 - xh[j] * s2);
                        }
                    }
                    self.accum(grads, *x, Tensor::new(self.shape(*x), gx)?)?;
                }
            }
            Op::Softmax(x) => {
                let n = g.cols();
                let mut gx = vec![0.0; g.numel()];
                for (r, (gr, sr)) in g.data().chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = sr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, Tensor::new(out.shape(), gx)?)?;
            }
            Op::LogSoftmax(x) => {
                let n = g.cols();
                let mut gx = vec![0.0; g.numel()];
                for (r, (gr, yr)) in g.data().chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        gx[r * n + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.accum(grads, *x, Tensor::new(out.shape(), gx)?)?;
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), g.item());
                self.accum(grads, *x, gx)?;
            }
            Op::Gather { x, idx } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let d = gx.data_mut();
                for (&src, &gv) in idx.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accum(grads, *x, gx)?;
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = g.cols();
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                }
                self.accum(grads, *x, Tensor::new(&[m, n], gx)?)?;
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accum(grads, p, Tensor::new(&[m, w], gp)?)?;
                    }
                    offset += w;
                }
            }
            // Both Fourier mixers are self-adjoint linear maps.
            Op::Ft(x) => {
                let (t, h) = (g.shape()[0], g.shape()[1]);
                self.accum(grads, *x, Tensor::new(g.shape(), ft_real_2d(g.data(), t, h))?)?;
            }
            Op::Wft(x, grid) => {
                self.accum(grads, *x, Tensor::new(g.shape(), wft_raw(g.data(), grid))?)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Dense gradient list aligned with the store's parameter order.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`: `max_i |a_i - d_i| / (|a_i| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'static>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &coords)
}

/// [`finite_diff_check`] restricted to the flat coordinates `coords`.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<'static>, Var) -> Result<Var>,
{
    let mut tape = Tape::detached();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::detached();
        let v = t.leaf(p.clone());
        let l = f(&mut t, v)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
    }
    Ok(worst)
}

/// Finite-difference check of the gradient of a store-backed loss with
/// respect to parameter `id`, over the flat coordinates `coords`.
pub fn finite_diff_param<F>(
    store: &mut ParamStore,
    id: ParamId,
    coords: &[usize],
    h: f64,
    f: F,
) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let grads = tape.backward(loss)?;
        grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference(s);
        let l = f(&mut t)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let fp = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig - h;
        let fm = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn dot_gradient_is_input() {
        let mut tape = Tape::detached();
        let w = tape.leaf(Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let x = tape.constant(Tensor::new(&[3, 1], vec![3.0, 4.0, -5.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 4.0, -5.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn squared_product_matches_differences() {
        let mut r = rng();
        let b = Tensor::randn(&[4, 3], 1.0, &mut r);
        let a = Tensor::randn(&[2, 4], 1.0, &mut r);
        let err = finite_diff_check(
            |t, x| {
                let bv = t.constant(b.clone());
                let p = t.matmul(x, bv)?;
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut tape = Tape::detached();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(3.0));
        let l = tape.scale(a, 4.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get_or_zeros(b, &[1]).data(), &[0.0]);
        assert_eq!(g.get(a).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::detached();
        let a = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_trivial_functions() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let s = t.mul(v, v)?;
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
        let c = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
        assert_eq!(c, 0.0);
    }

    /// Every differentiable op against central differences.
    #[test]
    fn every_op_passes_gradient_check() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 6], 1.0, &mut r);
        let w = Tensor::randn(&[6, 6], 0.5, &mut r);
        let c = Tensor::randn(&[4, 6], 1.0, &mut r);
        let gain = Tensor::randn(&[6], 1.0, &mut r);
        let bias = Tensor::randn(&[6], 1.0, &mut r);
        let probe = Tensor::randn(&[4, 6], 1.0, &mut r);
        let grid = WindowGrid::new(2, 2, 6, 2, 2, (1, 1)).unwrap();

        type Body<'a> = dyn Fn(&mut Tape<'static>, Var) -> Result<Var> + 'a;
        let cases: Vec<(&str, Box<Body<'_>>)> = vec![
            ("matmul", Box::new(|t, v| { let wv = t.constant(w.clone()); t.matmul(v, wv) })),
            ("matmul_nt", Box::new(|t, v| { let cv = t.constant(c.clone()); t.matmul_nt(v, cv) })),
            ("transpose", Box::new(|t, v| { let y = t.transpose(v)?; t.transpose(y) })),
            ("add_sub", Box::new(|t, v| { let cv = t.constant(c.clone()); let y = t.add(v, cv)?; t.sub(y, v).and_then(|z| t.add(z, v)) })),
            ("mul", Box::new(|t, v| t.mul(v, v))),
            ("mul_const", Box::new(|t, v| t.mul_const(v, &c))),
            ("add_row", Box::new(|t, v| { let b = t.constant(bias.clone()); t.add_row(v, b) })),
            ("gelu", Box::new(|t, v| Ok(t.gelu(v)))),
            ("layer_norm", Box::new(|t, v| { let g = t.constant(gain.clone()); let b = t.constant(bias.clone()); t.layer_norm(v, g, b) })),
            ("softmax", Box::new(|t, v| Ok(t.softmax(v)))),
            ("log_softmax", Box::new(|t, v| Ok(t.log_softmax(v)))),
            ("gather", Box::new(|t, v| { let y = t.gather(v, vec![3, 3, 0, 23, 7, 11], &[2, 3])?; t.mul(y, y) })),
            ("select_rows", Box::new(|t, v| t.select_rows(v, &[3, 1]))),
            ("slice_concat", Box::new(|t, v| { let a = t.slice_cols(v, 0, 2)?; let b = t.slice_cols(v, 2, 4)?; let cc = t.concat_cols(&[b, a])?; t.mul_const(cc, &c) })),
            ("ft", Box::new(|t, v| t.ft(v))),
            ("wft", Box::new(|t, v| t.wft(v, &grid))),
        ];
        for (name, body) in cases {
            let err = finite_diff_check(
                |t, v| {
                    let y = body(t, v)?;
                    // project onto a fixed random direction so every output coordinate matters
                    let p = if t.shape(y) == probe.shape() {
                        t.mul_const(y, &probe)?
                    } else {
                        y
                    };
                    let sq = t.mul(p, p)?;
                    let lin = t.sum(p);
                    let q = t.sum(sq);
                    t.add(q, lin)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-3, "{name}: {err}");
        }

        // gradients into layer-norm gain/bias and matmul weights
        let err = finite_diff_check(
            |t, g| {
                let xv = t.constant(x.clone());
                let b = t.constant(bias.clone());
                let y = t.layer_norm(xv, g, b)?;
                let y = t.mul_const(y, &probe)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &gain,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "layer_norm gain: {err}");
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.param(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn flops_count_matmuls() {
        let mut tape = Tape::detached();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops().total(Convention::Fusion), 16);
        assert_eq!(tape.flops().total(Convention::Backbone), 8);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let store = ParamStore::new();
        let mut tape = Tape::inference(&store);
        let a = tape.leaf(Tensor::scalar(1.0));
        assert!(tape.backward(a).is_err());
    }
}
