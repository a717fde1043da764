//! Single-scale retention in its parallel and recurrent forms, a brute-force
//! reference evaluation, and the multi-head cross-attention used by the decoder.
//!
//! Queries are rotated by `e^{+itθ}` and keys by the conjugate phase
//! `e^{-imθ}`, treating channel pairs `(2d, 2d+1)` as complex numbers. The
//! score between positions `t` and `m` is the real part of the complex
//! bilinear product `Σ_d q̃_{t,d} k̃_{m,d}`, which depends on positions only
//! through `t - m`. In real arithmetic that is a plain dot product with the
//! imaginary key components negated, so all three formulations share the
//! same linear structure `Σ_{m≤t} γ^{t-m} (Q_t·K_m) V_m`.

use rand::Rng;

use crate::autodiff::{FlopCounter, Tape, Var};
use crate::error::{ensure, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Default rotation base.
pub const DEFAULT_THETA_BASE: f64 = 10_000.0;
/// Default decay.
pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl RetentionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let h = w_q.shape()[0];
        for w in [&w_q, &w_k, &w_v] {
            ensure!(
                w.shape() == [h, h],
                shape_err!("retention weights must be square {h}x{h}, got {:?}", w.shape())
            );
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn random<R: Rng + ?Sized>(h: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_q: Tensor::randn(&[h, h], std, rng),
            w_k: Tensor::randn(&[h, h], std, rng),
            w_v: Tensor::randn(&[h, h], std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// Per-pair rotation angles `θ_d = base^{-2d/H}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryPhase {
    pub theta_base: f64,
    dim: usize,
    angles: Vec<f64>,
}

impl RotaryPhase {
    pub fn new(dim: usize, theta_base: f64) -> Result<Self> {
        ensure!(
            dim >= 2 && dim % 2 == 0,
            shape_err!("rotation needs an even hidden size, got {dim}")
        );
        let angles = (0..dim / 2)
            .map(|d| theta_base.powf(-2.0 * d as f64 / dim as f64))
            .collect();
        Ok(Self {
            theta_base,
            dim,
            angles,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn angle(&self, pair: usize) -> f64 {
        self.angles[pair]
    }

    /// `(cos, signed sin)` tables for positions `start..start+len`, laid out so
    /// that `rot(x) = x ⊙ cos + swap(x) ⊙ sin` with `swap` exchanging each pair.
    fn tables(&self, start: usize, len: usize, conjugate: bool) -> (Tensor, Tensor) {
        let h = self.dim;
        let sign = if conjugate { -1.0 } else { 1.0 };
        let mut cos = vec![0.0; len * h];
        let mut sin = vec![0.0; len * h];
        for r in 0..len {
            let t = (start + r) as f64;
            for (d, &th) in self.angles.iter().enumerate() {
                let (s, c) = (sign * t * th).sin_cos();
                cos[r * h + 2 * d] = c;
                cos[r * h + 2 * d + 1] = c;
                sin[r * h + 2 * d] = -s;
                sin[r * h + 2 * d + 1] = s;
            }
        }
        (
            Tensor::new(&[len, h], cos).expect("table shape"),
            Tensor::new(&[len, h], sin).expect("table shape"),
        )
    }
}

/// Rotates channel pairs of row `r` by `(start + r)·θ_d` (negated when `conjugate`).
pub fn rotate(
    tape: &mut Tape<'_>,
    x: Var,
    phase: &RotaryPhase,
    conjugate: bool,
    start: usize,
) -> Result<Var> {
    let (t, h) = (tape.value(x).rows(), tape.value(x).cols());
    ensure!(
        tape.value(x).ndim() == 2 && h == phase.dim(),
        shape_err!("rotation of {:?} with phase dim {}", tape.shape(x), phase.dim())
    );
    let (cos, sin) = phase.tables(start, t, conjugate);
    let swap: Vec<usize> = (0..t * h).map(|i| i ^ 1).collect();
    let a = tape.mul_const(x, &cos)?;
    let s = tape.gather(x, swap, &[t, h])?;
    let b = tape.mul_const(s, &sin)?;
    tape.add(a, b)
}

/// Plain-tensor form of [`rotate`] starting at position 0.
pub fn apply_rotation(x: &Tensor, phase: &RotaryPhase, conjugate: bool) -> Result<Tensor> {
    ensure!(
        phase.dim() % 2 == 0 && x.cols() == phase.dim(),
        shape_err!("apply_rotation: {:?} vs phase dim {}", x.shape(), phase.dim())
    );
    let mut tape = Tape::detached();
    let v = tape.constant(x.clone());
    let y = rotate(&mut tape, v, phase, conjugate, 0)?;
    Ok(tape.value(y).clone())
}

/// Real part of the complex bilinear pairing of two rows.
pub fn complex_bilinear(a: &[f64], b: &[f64]) -> f64 {
    a.chunks(2)
        .zip(b.chunks(2))
        .map(|(p, q)| p[0] * q[0] - p[1] * q[1])
        .sum()
}

fn pair_conjugator(rows: usize, h: usize) -> Tensor {
    let data = (0..rows * h).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    Tensor::new(&[rows, h], data).expect("shape")
}

/// Causal decay mask, `d[n][m] = γ^{n-m}` for `n ≥ m`, else 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMask {
    pub gamma: f64,
    pub d: Tensor,
}

pub fn decay_mask(gamma: f64, t: usize) -> Result<DecayMask> {
    ensure!(
        gamma > 0.0 && gamma <= 1.0,
        Error::Domain(format!("decay must lie in (0, 1], got {gamma}"))
    );
    ensure!(t >= 1, shape_err!("decay mask length must be >= 1"));
    let ln = gamma.ln();
    let mut d = vec![0.0; t * t];
    for n in 0..t {
        for m in 0..=n {
            d[n * t + m] = ((n - m) as f64 * ln).exp();
        }
    }
    Ok(DecayMask {
        gamma,
        d: Tensor::new(&[t, t], d)?,
    })
}

/// Recurrent carrier `S_t` plus the number of tokens consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionState {
    pub s: Tensor,
    pub step: usize,
}

impl RetentionState {
    pub fn zeros(h: usize) -> Self {
        Self {
            s: Tensor::zeros(&[h, h]),
            step: 0,
        }
    }

    /// Bytes of state carried between decode steps; independent of sequence length.
    pub fn nbytes(&self) -> usize {
        self.s.nbytes()
    }
}

/// Weight handles of one retention layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct RetentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl RetentionVars {
    pub fn constants(tape: &mut Tape<'_>, w: &RetentionWeights) -> Self {
        Self {
            w_q: tape.constant(w.w_q.clone()),
            w_k: tape.constant(w.w_k.clone()),
            w_v: tape.constant(w.w_v.clone()),
        }
    }
}

/// Rotated queries, conjugate-rotated (and pair-conjugated) keys, and values
/// for rows at positions `start..`.
fn project(
    tape: &mut Tape<'_>,
    x: Var,
    w: RetentionVars,
    phase: &RotaryPhase,
    start: usize,
) -> Result<(Var, Var, Var)> {
    let rows = tape.value(x).rows();
    let h = phase.dim();
    let q = tape.matmul(x, w.w_q)?;
    let q = rotate(tape, q, phase, false, start)?;
    let k = tape.matmul(x, w.w_k)?;
    let k = rotate(tape, k, phase, true, start)?;
    let k = tape.mul_const(k, &pair_conjugator(rows, h))?;
    let v = tape.matmul(x, w.w_v)?;
    Ok((q, k, v))
}

/// Parallel form `(Q Kᵀ ⊙ D) V` over a full sequence.
pub fn retention_parallel_tape(
    tape: &mut Tape<'_>,
    x: Var,
    w: RetentionVars,
    phase: &RotaryPhase,
    gamma: f64,
) -> Result<Var> {
    let t = tape.value(x).rows();
    let mask = decay_mask(gamma, t)?;
    let (q, k, v) = project(tape, x, w, phase, 0)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.mul_const(scores, &mask.d)?;
    tape.matmul(scores, v)
}

/// One recurrent step `S_t = γ S_{t-1} + K_tᵀ V_t`, output `Q_t S_t`, for a
/// single row `x_t` at position `state.step`. Returns the output row and the
/// new state as tape values.
pub fn retention_step_tape(
    tape: &mut Tape<'_>,
    x_t: Var,
    state: &RetentionState,
    w: RetentionVars,
    phase: &RotaryPhase,
    gamma: f64,
) -> Result<(Var, Var)> {
    ensure!(
        tape.value(x_t).rows() == 1,
        shape_err!("recurrent step takes one row, got {:?}", tape.shape(x_t))
    );
    ensure!(
        (0.0..=1.0).contains(&gamma),
        Error::Domain(format!("decay must lie in [0, 1], got {gamma}"))
    );
    let (q, k, v) = project(tape, x_t, w, phase, state.step)?;
    let prev = tape.constant(state.s.clone());
    let prev = tape.scale(prev, gamma);
    let kt = tape.transpose(k)?;
    let kv = tape.matmul(kt, v)?;
    let s = tape.add(prev, kv)?;
    let out = tape.matmul(q, s)?;
    Ok((out, s))
}

/// Forward FLOPs of [`retention_parallel_tape`] on `t` rows of width `h`.
pub fn retention_parallel_flops(t: usize, h: usize) -> FlopCounter {
    FlopCounter::matmul(t, h, h) * 3 + FlopCounter::matmul(t, h, t) + FlopCounter::matmul(t, t, h)
}

/// Forward FLOPs of one [`retention_step_tape`]; independent of the step index.
pub fn retention_step_flops(h: usize) -> FlopCounter {
    FlopCounter::matmul(1, h, h) * 3 + FlopCounter::matmul(h, 1, h) + FlopCounter::matmul(1, h, h)
}

pub fn retention_parallel(
    x: &Tensor,
    w: &RetentionWeights,
    phase: &RotaryPhase,
    gamma: f64,
) -> Result<Tensor> {
    let mut tape = Tape::detached();
    let xv = tape.constant(x.clone());
    let wv = RetentionVars::constants(&mut tape, w);
    let y = retention_parallel_tape(&mut tape, xv, wv, phase, gamma)?;
    Ok(tape.value(y).clone())
}

pub fn retention_recurrent_step(
    x_t: &Tensor,
    state: &RetentionState,
    w: &RetentionWeights,
    phase: &RotaryPhase,
    gamma: f64,
) -> Result<(Tensor, RetentionState)> {
    let mut tape = Tape::detached();
    let row = x_t.clone().reshape(&[1, x_t.numel()])?;
    let xv = tape.constant(row);
    let wv = RetentionVars::constants(&mut tape, w);
    let (out, s) = retention_step_tape(&mut tape, xv, state, wv, phase, gamma)?;
    Ok((
        tape.value(out).clone(),
        RetentionState {
            s: tape.value(s).clone(),
            step: state.step + 1,
        },
    ))
}

/// Runs [`retention_recurrent_step`] over every row from a zero state.
pub fn retention_recurrent(
    x: &Tensor,
    w: &RetentionWeights,
    phase: &RotaryPhase,
    gamma: f64,
) -> Result<Tensor> {
    let (t, h) = (x.rows(), x.cols());
    let mut state = RetentionState::zeros(h);
    let mut out = Vec::with_capacity(t * h);
    for r in 0..t {
        let (y, next) = retention_recurrent_step(&x.slice_rows(r, 1)?, &state, w, phase, gamma)?;
        out.extend_from_slice(y.data());
        state = next;
    }
    Tensor::new(&[t, h], out)
}

/// Reference `Σ_{m≤t} γ^{t-m} Q_t (K_mᵀ V_m)` with explicit outer products and
/// complex-number rotations; O(T²H²).
pub fn retention_brute(
    x: &Tensor,
    w: &RetentionWeights,
    phase: &RotaryPhase,
    gamma: f64,
) -> Result<Tensor> {
    let (t, h) = (x.rows(), x.cols());
    ensure!(
        h == w.dim() && h == phase.dim(),
        shape_err!("brute retention dims: x {:?}, weights {}", x.shape(), w.dim())
    );
    let proj = |wm: &Tensor| -> Vec<Vec<f64>> {
        (0..t)
            .map(|r| {
                (0..h)
                    .map(|j| (0..h).map(|i| x.at(r, i) * wm.at(i, j)).sum())
                    .collect()
            })
            .collect()
    };
    let (qr, kr, v) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
    // complex rotation; keys stored as the conjugate of k̃ e^{-imθ} so that a
    // real dot product gives Re(q̃ k̃)
    let rot = |row: &[f64], pos: usize, sign: f64, conj_out: bool| -> Vec<f64> {
        let mut out = vec![0.0; h];
        for d in 0..h / 2 {
            let ang = sign * pos as f64 * phase.angle(d);
            let (re, im) = (row[2 * d], row[2 * d + 1]);
            let (rr, ri) = (re * ang.cos() - im * ang.sin(), re * ang.sin() + im * ang.cos());
            out[2 * d] = rr;
            out[2 * d + 1] = if conj_out { -ri } else { ri };
        }
        out
    };
    let q: Vec<Vec<f64>> = (0..t).map(|r| rot(&qr[r], r, 1.0, false)).collect();
    let k: Vec<Vec<f64>> = (0..t).map(|r| rot(&kr[r], r, -1.0, true)).collect();
    let mut out = vec![0.0; t * h];
    let mut outer = vec![0.0; h * h];
    for n in 0..t {
        for m in 0..=n {
            let decay = gamma.powi((n - m) as i32);
            for i in 0..h {
                for j in 0..h {
                    outer[i * h + j] = k[m][i] * v[m][j];
                }
            }
            for j in 0..h {
                let mut acc = 0.0;
                for i in 0..h {
                    acc += q[n][i] * outer[i * h + j];
                }
                out[n * h + j] += decay * acc;
            }
        }
    }
    Tensor::new(&[t, h], out)
}

/// Scaled dot-product attention split over `heads` column groups of
/// already-projected queries `[T×H]`, keys and values `[S×H]`.
pub fn multi_head_attend(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let h = tape.value(q).cols();
    ensure!(
        heads >= 1 && h % heads == 0,
        Error::Config(format!("{heads} heads do not divide hidden size {h}"))
    );
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Forward FLOPs of [`multi_head_attend`] for `t` queries over `s` keys of width `h`.
pub fn attend_flops(t: usize, s: usize, h: usize) -> FlopCounter {
    FlopCounter::matmul(t, h, s) + FlopCounter::matmul(t, s, h)
}

/// Projection weights `[H×H]` and biases `[H]` of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl AttentionWeights {
    pub fn random<R: Rng + ?Sized>(h: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_q: Tensor::randn(&[h, h], std, rng),
            b_q: Tensor::randn(&[h], std, rng),
            w_k: Tensor::randn(&[h, h], std, rng),
            b_k: Tensor::randn(&[h], std, rng),
            w_v: Tensor::randn(&[h, h], std, rng),
            b_v: Tensor::randn(&[h], std, rng),
            w_o: Tensor::randn(&[h, h], std, rng),
            b_o: Tensor::randn(&[h], std, rng),
        }
    }
}

/// Multi-head cross-attention of `q_in[T×H]` over `kv[S×H]`.
pub fn cross_attention(
    q_in: &Tensor,
    kv: &Tensor,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Tensor> {
    let mut tape = Tape::detached();
    let lin = |tape: &mut Tape<'_>, x: Var, wt: &Tensor, b: &Tensor| -> Result<Var> {
        let wv = tape.constant(wt.clone());
        let bv = tape.constant(b.clone());
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    };
    let qx = tape.constant(q_in.clone());
    let kx = tape.constant(kv.clone());
    let q = lin(&mut tape, qx, &w.w_q, &w.b_q)?;
    let k = lin(&mut tape, kx, &w.w_k, &w.b_k)?;
    let v = lin(&mut tape, kx, &w.w_v, &w.b_v)?;
    let a = multi_head_attend(&mut tape, q, k, v, heads)?;
    let o = lin(&mut tape, a, &w.w_o, &w.b_o)?;
    Ok(tape.value(o).clone())
}
