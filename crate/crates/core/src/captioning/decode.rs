use std::cmp::Ordering;

use rand::Rng;

use crate::autodiff::FlopCounter;
use crate::captioning::vocab::{BOS, EOS};
use crate::error::{ensure, Error, Result};
use crate::fusion::DecodeState;
use crate::model::Swifter;
use crate::par;
use crate::tensor::{log_softmax, Tensor};

/// A generated caption: tokens after `BOS` (ending in `EOS` when one was
/// produced) and the log-probability of each.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    /// FLOPs of each decode step, starting with the one that consumed `BOS`.
    pub step_flops: Vec<FlopCounter>,
}

impl Decoded {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// `BOS` followed by the generated tokens.
    pub fn with_bos(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tokens.iter().copied()).collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn step_logprobs(model: &Swifter, st: &mut DecodeState, token: usize) -> Result<(Tensor, FlopCounter)> {
    let before = st.flops;
    let logits = model.decode_step(st, token)?;
    let d = st.flops;
    Ok((
        log_softmax(&logits),
        FlopCounter {
            mul: d.mul - before.mul,
            add: d.add - before.add,
        },
    ))
}

fn decode_with<F>(model: &Swifter, input: &Tensor, max_len: usize, mut pick: F) -> Result<Decoded>
where
    F: FnMut(&[f64]) -> usize,
{
    ensure!(max_len >= 1, Error::Config("max_len must be at least 1".into()));
    let mut st = model.start_decode(input)?;
    let mut out = Decoded {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        step_flops: Vec::new(),
    };
    let mut tok = BOS;
    while out.tokens.len() < max_len {
        let (lp, f) = step_logprobs(model, &mut st, tok)?;
        out.step_flops.push(f);
        tok = pick(lp.data());
        out.tokens.push(tok);
        out.logprobs.push(lp.data()[tok]);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

/// Argmax decoding on recurrent state; at most `max_len` tokens.
pub fn greedy_decode(model: &Swifter, input: &Tensor, max_len: usize) -> Result<Decoded> {
    decode_with(model, input, max_len, argmax)
}

/// Draws each token from the model distribution.
pub fn sample_decode<R: Rng + ?Sized>(
    model: &Swifter,
    input: &Tensor,
    max_len: usize,
    rng: &mut R,
) -> Result<Decoded> {
    decode_with(model, input, max_len, |lp| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return i;
            }
        }
        // rounding left u above the cumulative mass
        lp.len() - 1 - lp.iter().rev().position(|l| l.is_finite()).unwrap_or(0)
    })
}

/// Greedy decoding of every input, in input order.
pub fn greedy_decode_batch(model: &Swifter, inputs: &[Tensor], max_len: usize) -> Result<Vec<Decoded>> {
    par::map_slice(inputs, |x| greedy_decode(model, x, max_len))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
}

fn length_score(logprob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len as f64).powf(alpha)
    }
}

struct Beam {
    tokens: Vec<usize>,
    logprob: f64,
    state: DecodeState,
    next: Tensor,
}

/// Beam search scored by `logprob / len^alpha`. Hypotheses that emit `EOS`
/// or reach `max_len` tokens are retired; the best `k` completed ones are
/// returned, best first. Beam sizes above `V·max_len` are rejected.
pub fn beam_search(
    model: &Swifter,
    input: &Tensor,
    k: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    let v = model.cfg.fusion.vocab_size;
    ensure!(k >= 1, Error::Config("beam size must be at least 1".into()));
    ensure!(max_len >= 1, Error::Config("max_len must be at least 1".into()));
    ensure!(
        k <= v * max_len,
        Error::Config(format!(
            "beam size {k} exceeds vocabulary size {v} times max_len {max_len}"
        ))
    );
    let mut st = model.start_decode(input)?;
    let (next, _) = step_logprobs(model, &mut st, BOS)?;
    let mut live = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
        state: st,
        next,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (b, beam) in live.iter().enumerate() {
            let len = beam.tokens.len() + 1;
            for (tok, &lp) in beam.next.data().iter().enumerate() {
                let total = beam.logprob + lp;
                cands.push((length_score(total, len, alpha), total, b, tok));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        cands.truncate(k);
        let mut next_live = Vec::new();
        for (score, total, b, tok) in cands {
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            if tok == EOS || tokens.len() >= max_len {
                done.push(Hypothesis {
                    tokens,
                    logprob: total,
                    score,
                });
                continue;
            }
            let mut state = live[b].state.clone();
            let (next, _) = step_logprobs(model, &mut state, tok)?;
            next_live.push(Beam {
                tokens,
                logprob: total,
                state,
                next,
            });
        }
        live = next_live;
    }
    done.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    done.truncate(k);
    Ok(done)
}
