use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::captioning::{greedy_decode, Vocabulary};
use crate::error::{ensure, Error, Result};
use crate::model::Swifter;
use crate::par;
use crate::tensor::Tensor;
use crate::training::cider::{CiderIndex, DEFAULT_SIGMA};
use crate::training::losses::{token_hits, xe_loss};
use crate::training::optim::{make_optimizer, OptimizerKind};
use crate::training::scst::{sample_with_rewards, scst_gradients, strip_eos};
use crate::training::shapeworld::ShapeWorldSample;

/// One captioned input with its tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Tensor,
    /// `BOS`, words, `EOS`.
    pub tokens: Vec<usize>,
    /// Reference word sequences for reward computation.
    pub refs: Vec<Vec<usize>>,
}

impl Example {
    pub fn decoder_input(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }
}

pub fn examples_from_samples(samples: &[ShapeWorldSample], vocab: &Vocabulary) -> Vec<Example> {
    samples
        .iter()
        .map(|s| Example {
            input: s.image.clone(),
            tokens: vocab.encode_caption(&s.caption),
            refs: vec![vocab.tokenize(&s.caption)],
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Xe,
    Scst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub mode: LossMode,
    pub scst_samples: usize,
    pub optimizer: OptimizerKind,
    /// Stop once teacher-forced token accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Steps between accuracy evaluations when a target is set.
    pub eval_every: usize,
    /// Longest sampled caption in SCST.
    pub max_len: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            steps: 2000,
            batch: 16,
            seed: 42,
            mode: LossMode::Xe,
            scst_samples: 5,
            optimizer: OptimizerKind::Sgd,
            target_accuracy: None,
            eval_every: 25,
            max_len: 16,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Error::Config(format!("learning rate must be positive, got {}", self.lr))
        );
        ensure!(
            self.batch >= 1 && self.scst_samples >= 1 && self.eval_every >= 1 && self.max_len >= 1,
            Error::Config("batch, scst_samples, eval_every and max_len must be positive".into())
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Mean sampled reward (SCST only).
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub steps_run: usize,
    /// Last measured teacher-forced token accuracy, if any.
    pub accuracy: Option<f64>,
}

pub fn write_log_csv<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "step,loss,reward")?;
    for r in rows {
        match r.reward {
            Some(v) => writeln!(w, "{},{},{}", r.step, r.loss, v)?,
            None => writeln!(w, "{},{},", r.step, r.loss)?,
        }
    }
    Ok(())
}

/// Teacher-forced XE loss and dense gradients for one example.
pub fn xe_gradients(model: &Swifter, ex: &Example) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new(&model.store);
    let x = tape.constant(ex.input.clone());
    let logits = model.logits(&mut tape, x, ex.decoder_input())?;
    let loss = xe_loss(&mut tape, logits, ex.targets())?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.param_grads(&model.store)))
}

/// Mean teacher-forced XE loss over `examples`.
pub fn evaluate_loss(model: &Swifter, examples: &[Example]) -> Result<f64> {
    let losses = par::map_slice(examples, |ex| -> Result<f64> {
        let mut tape = Tape::inference(&model.store);
        let x = tape.constant(ex.input.clone());
        let logits = model.logits(&mut tape, x, ex.decoder_input())?;
        let loss = xe_loss(&mut tape, logits, ex.targets())?;
        Ok(tape.value(loss).item())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len() as f64)
}

/// Fraction of target tokens predicted by teacher-forced argmax.
pub fn token_accuracy(model: &Swifter, examples: &[Example]) -> Result<f64> {
    let hits = par::map_slice(examples, |ex| -> Result<(usize, usize)> {
        let logits = model.forward(&ex.input, ex.decoder_input())?;
        Ok(token_hits(&logits, ex.targets()))
    });
    let (mut h, mut n) = (0, 0);
    for r in hits {
        let (a, b) = r?;
        h += a;
        n += b;
    }
    Ok(h as f64 / n.max(1) as f64)
}

/// Fraction of examples whose greedy caption equals the reference exactly.
pub fn greedy_exact_match(model: &Swifter, examples: &[Example], max_len: usize) -> Result<f64> {
    let hits = par::map_slice(examples, |ex| -> Result<bool> {
        let d = greedy_decode(model, &ex.input, max_len)?;
        Ok(d.tokens.as_slice() == ex.targets())
    });
    let mut n = 0;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / examples.len() as f64)
}

fn sum_grads(parts: Vec<Vec<Tensor>>, scale: f64) -> Result<Vec<Tensor>> {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b)?;
        }
    }
    Ok(acc.into_iter().map(|t| t.scale(scale)).collect())
}

/// Optimizes `model` on `examples`. Per-example gradients are computed in
/// parallel and reduced in batch order, so results do not depend on the
/// thread count.
pub fn train_loop(model: &mut Swifter, examples: &[Example], cfg: &TrainingConfig) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(!examples.is_empty(), Error::Config("no training examples".into()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = make_optimizer(cfg.optimizer, cfg.lr);
    let index = match cfg.mode {
        LossMode::Scst => Some(CiderIndex::new(
            &examples.iter().map(|e| e.refs.clone()).collect::<Vec<_>>(),
        )),
        LossMode::Xe => None,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut accuracy = None;
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let (loss, reward, grads) = match cfg.mode {
            LossMode::Xe => {
                let parts = par::map_slice(&batch, |&i| xe_gradients(model, &examples[i]));
                let mut losses = Vec::with_capacity(parts.len());
                let mut grads = Vec::with_capacity(parts.len());
                for p in parts {
                    let (l, g) = p?;
                    losses.push(l);
                    grads.push(g);
                }
                let n = batch.len() as f64;
                (losses.iter().sum::<f64>() / n, None, sum_grads(grads, 1.0 / n)?)
            }
            LossMode::Scst => {
                let index = index.as_ref().expect("scst index");
                let mut drawn = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let ex = &examples[i];
                    drawn.push(sample_with_rewards(
                        model,
                        &ex.input,
                        cfg.scst_samples,
                        cfg.max_len,
                        &mut rng,
                        |toks| index.score(strip_eos(toks), &ex.refs, DEFAULT_SIGMA),
                    )?);
                }
                let jobs: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
                let parts = par::map_slice(&jobs, |&(k, i)| {
                    scst_gradients(model, &examples[i].input, &drawn[k].0, &drawn[k].1)
                });
                let mut losses = Vec::with_capacity(parts.len());
                let mut grads = Vec::with_capacity(parts.len());
                for p in parts {
                    let (l, g) = p?;
                    losses.push(l);
                    grads.push(g);
                }
                let n = batch.len() as f64;
                let rewards: Vec<f64> = drawn.iter().flat_map(|d| d.1.iter().copied()).collect();
                let mean_r = rewards.iter().sum::<f64>() / rewards.len() as f64;
                (losses.iter().sum::<f64>() / n, Some(mean_r), sum_grads(grads, 1.0 / n)?)
            }
        };
        ensure!(
            loss.is_finite(),
            Error::NonFinite(format!("loss became {loss} at step {step}"))
        );
        opt.step(&mut model.store, &grads)?;
        log.push(LogRow { step, loss, reward });
        steps_run = step + 1;
        if let Some(target) = cfg.target_accuracy {
            if steps_run % cfg.eval_every == 0 || steps_run == cfg.steps {
                let acc = token_accuracy(model, examples)?;
                accuracy = Some(acc);
                if acc >= target {
                    break;
                }
            }
        }
    }
    Ok(TrainReport {
        log,
        steps_run,
        accuracy,
    })
}
