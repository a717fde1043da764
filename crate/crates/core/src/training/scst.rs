//! Self-critical sequence training: REINFORCE on sampled captions with the
//! mean reward of the samples as baseline.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::captioning::{sample_decode, BOS, EOS};
use crate::error::{ensure, Error, Result};
use crate::fusion::FusionModel;
use crate::model::Swifter;
use crate::tensor::Tensor;

/// Generated tokens up to (not including) the first `EOS`.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Summed log-probability of `generated` (tokens after `BOS`) given an encoded memory.
pub fn sequence_logprob(
    tape: &mut Tape<'_>,
    fusion: &FusionModel,
    memory: Var,
    generated: &[usize],
) -> Result<Var> {
    ensure!(
        !generated.is_empty(),
        Error::Contract("empty generated sequence".into())
    );
    let n = generated.len();
    let mut inputs = vec![BOS];
    inputs.extend_from_slice(&generated[..n - 1]);
    let logits = fusion.decode_parallel(tape, memory, &inputs)?;
    let v = fusion.cfg.vocab_size;
    let lp = tape.log_softmax(logits);
    let idx = generated.iter().enumerate().map(|(t, &tok)| t * v + tok).collect();
    let picked = tape.gather(lp, idx, &[n])?;
    Ok(tape.sum(picked))
}

/// Mean of `rewards`, or exactly the common value when all are equal.
pub fn baseline(rewards: &[f64]) -> f64 {
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        rewards[0]
    } else {
        rewards.iter().sum::<f64>() / rewards.len() as f64
    }
}

/// `-Σ_i (r_i - b)·log p(y_i) / n` for one image and its sampled captions.
pub fn scst_loss(
    tape: &mut Tape<'_>,
    model: &Swifter,
    input: Var,
    samples: &[Vec<usize>],
    rewards: &[f64],
) -> Result<Var> {
    ensure!(
        !samples.is_empty() && samples.len() == rewards.len(),
        Error::Contract(format!(
            "{} samples with {} rewards",
            samples.len(),
            rewards.len()
        ))
    );
    let b = baseline(rewards);
    let f = model.features(tape, input)?;
    let memory = model.fusion.encode(tape, f)?;
    let n = samples.len() as f64;
    let mut total: Option<Var> = None;
    for (s, &r) in samples.iter().zip(rewards) {
        let lp = sequence_logprob(tape, &model.fusion, memory, s)?;
        let term = tape.scale(lp, -(r - b) / n);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one sample"))
}

/// Samples `n` captions for `input` and scores each with `reward`.
pub fn sample_with_rewards<R, F>(
    model: &Swifter,
    input: &Tensor,
    n: usize,
    max_len: usize,
    rng: &mut R,
    reward: F,
) -> Result<(Vec<Vec<usize>>, Vec<f64>)>
where
    R: Rng + ?Sized,
    F: Fn(&[usize]) -> f64,
{
    ensure!(n >= 1, Error::Config("scst needs at least one sample".into()));
    let mut samples = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for _ in 0..n {
        let d = sample_decode(model, input, max_len, rng)?;
        rewards.push(reward(strip_eos(&d.tokens)));
        samples.push(d.tokens);
    }
    Ok((samples, rewards))
}

/// Loss value and dense parameter gradients of [`scst_loss`].
pub fn scst_gradients(
    model: &Swifter,
    input: &Tensor,
    samples: &[Vec<usize>],
    rewards: &[f64],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new(&model.store);
    let x = tape.constant(input.clone());
    let loss = scst_loss(&mut tape, model, x, samples, rewards)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.param_grads(&model.store)))
}
