//! Fusion model: a Fourier encoder over projected image features, a
//! retention decoder with cross-attention over the encoder output, a
//! per-layer aggregation and the token classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Convention, FlopCounter, Tape, Var};
use crate::backbone::ft_layer_flops;
use crate::error::{ensure, shape_err, Error, Result};
use crate::nn::{FeedForward, Init, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::retention::{
    attend_flops, multi_head_attend, retention_parallel_flops, retention_parallel_tape,
    retention_step_flops, retention_step_tape, RetentionState, RetentionVars, RotaryPhase,
    DEFAULT_GAMMA, DEFAULT_THETA_BASE,
};
use crate::tensor::Tensor;

/// Smallest usable vocabulary: `PAD`, `BOS` and `EOS`.
pub const MIN_VOCAB: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_enc: usize,
    pub n_dec: usize,
    pub hidden: usize,
    pub ff_size: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub gamma: f64,
    pub theta_base: f64,
    /// Width of the incoming image features.
    pub d_m: usize,
    pub tie_embeddings: bool,
}

impl FusionConfig {
    /// Three encoder and three decoder layers, H=96, F=384, 10k vocabulary.
    pub fn small() -> Self {
        Self {
            n_enc: 3,
            n_dec: 3,
            hidden: 96,
            ff_size: 384,
            heads: 4,
            vocab_size: 10_000,
            max_len: 128,
            gamma: DEFAULT_GAMMA,
            theta_base: DEFAULT_THETA_BASE,
            d_m: 768,
            tie_embeddings: false,
        }
    }

    /// Two plus two layers of the small width, sized for desk training.
    pub fn desk(d_m: usize, vocab_size: usize) -> Self {
        Self {
            n_enc: 2,
            n_dec: 2,
            d_m,
            vocab_size,
            max_len: 16,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.hidden >= 2 && self.hidden % 2 == 0,
            Error::Config(format!("hidden size must be even, got {}", self.hidden))
        );
        ensure!(
            self.heads >= 1 && self.hidden % self.heads == 0,
            Error::Config(format!("{} heads do not divide hidden size {}", self.heads, self.hidden))
        );
        ensure!(
            self.vocab_size >= MIN_VOCAB,
            Error::Config(format!("vocabulary needs at least {MIN_VOCAB} ids"))
        );
        ensure!(
            self.ff_size >= 1 && self.d_m >= 1 && self.max_len >= 1,
            Error::Config("ff_size, d_m and max_len must be positive".into())
        );
        ensure!(
            (0.0..=1.0).contains(&self.gamma) && self.gamma > 0.0,
            Error::Config(format!("decay must lie in (0, 1], got {}", self.gamma))
        );
        ensure!(
            self.theta_base > 0.0,
            Error::Config("theta_base must be positive".into())
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_ft: LayerNorm,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    /// `E = X + FT(norm(X))`, then `E + FF(norm(E))`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = self.norm_ft.forward(tape, x)?;
        let f = tape.ft(n)?;
        let e = tape.add(x, f)?;
        let n = self.norm_ff.forward(tape, e)?;
        let f = self.ff.forward(tape, n)?;
        tape.add(e, f)
    }

    fn num_params(&self) -> usize {
        self.norm_ft.num_params() + self.norm_ff.num_params() + self.ff.num_params()
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm_ft.params();
        p.extend(self.norm_ff.params());
        p.extend(self.ff.params());
        p
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_d: LayerNorm,
    pub norm_ca: LayerNorm,
    pub norm_ff: LayerNorm,
    pub ret_q: Linear,
    pub ret_k: Linear,
    pub ret_v: Linear,
    pub ca_q: Linear,
    pub ca_k: Linear,
    pub ca_v: Linear,
    pub ca_o: Linear,
    pub ff: FeedForward,
}

/// Decoder input mode.
pub enum DecoderMode<'s> {
    /// All rows at once from position 0.
    Parallel,
    /// One row continuing from the given state.
    Recurrent(&'s RetentionState),
}

impl DecoderLayer {
    fn retention_vars(&self, tape: &mut Tape<'_>) -> RetentionVars {
        RetentionVars {
            w_q: tape.param(self.ret_q.weight),
            w_k: tape.param(self.ret_k.weight),
            w_v: tape.param(self.ret_v.weight),
        }
    }

    /// Projected cross-attention keys and values of the encoder output.
    pub fn memory_kv(&self, tape: &mut Tape<'_>, memory: Var) -> Result<(Var, Var)> {
        Ok((self.ca_k.forward(tape, memory)?, self.ca_v.forward(tape, memory)?))
    }

    /// `D = Y + Ret(norm(Y))`, `W = D + CA(norm(D), mem)`, `Y' = W + FF(norm(W))`.
    ///
    /// In recurrent mode `y` is a single row and the new retention state is
    /// returned alongside.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        y: Var,
        mem_kv: (Var, Var),
        mode: DecoderMode<'_>,
        phase: &RotaryPhase,
        gamma: f64,
        heads: usize,
    ) -> Result<(Var, Option<Var>)> {
        let vars = self.retention_vars(tape);
        let n = self.norm_d.forward(tape, y)?;
        let (r, state) = match mode {
            DecoderMode::Parallel => (retention_parallel_tape(tape, n, vars, phase, gamma)?, None),
            DecoderMode::Recurrent(st) => {
                ensure!(
                    st.s.shape() == [phase.dim(), phase.dim()],
                    Error::Contract(format!(
                        "retention state {:?} does not match hidden size {}",
                        st.s.shape(),
                        phase.dim()
                    ))
                );
                let (out, s) = retention_step_tape(tape, n, st, vars, phase, gamma)?;
                (out, Some(s))
            }
        };
        let d = tape.add(y, r)?;
        let n = self.norm_ca.forward(tape, d)?;
        let q = self.ca_q.forward(tape, n)?;
        let a = multi_head_attend(tape, q, mem_kv.0, mem_kv.1, heads)?;
        let a = self.ca_o.forward(tape, a)?;
        let w = tape.add(d, a)?;
        let n = self.norm_ff.forward(tape, w)?;
        let f = self.ff.forward(tape, n)?;
        Ok((tape.add(w, f)?, state))
    }

    fn linears(&self) -> [&Linear; 7] {
        [
            &self.ret_q, &self.ret_k, &self.ret_v, &self.ca_q, &self.ca_k, &self.ca_v, &self.ca_o,
        ]
    }

    fn num_params(&self) -> usize {
        self.norm_d.num_params()
            + self.norm_ca.num_params()
            + self.norm_ff.num_params()
            + self.linears().iter().map(|l| l.num_params()).sum::<usize>()
            + self.ff.num_params()
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm_d.params();
        p.extend(self.norm_ca.params());
        p.extend(self.norm_ff.params());
        for l in self.linears() {
            p.extend(l.params());
        }
        p.extend(self.ff.params());
        p
    }
}

/// `Σ_n P_n(y_n)`, followed by `norm` when given.
pub fn aggregate_layers(
    tape: &mut Tape<'_>,
    outputs: &[Var],
    projections: &[Linear],
    norm: Option<&LayerNorm>,
) -> Result<Var> {
    ensure!(
        !outputs.is_empty(),
        Error::Contract("aggregation needs at least one layer output".into())
    );
    ensure!(
        outputs.len() == projections.len(),
        Error::Contract(format!(
            "{} layer outputs for {} projections",
            outputs.len(),
            projections.len()
        ))
    );
    let mut acc = projections[0].forward(tape, outputs[0])?;
    for (y, p) in outputs.iter().zip(projections).skip(1) {
        let z = p.forward(tape, *y)?;
        acc = tape.add(acc, z)?;
    }
    match norm {
        Some(n) => n.forward(tape, acc),
        None => Ok(acc),
    }
}

/// Learnable scalar count per submodule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub items: Vec<(String, usize)>,
}

impl ParamAudit {
    pub fn total(&self) -> usize {
        self.items.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub input: Linear,
    pub embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Option<LayerNorm>,
    pub decoder: Vec<DecoderLayer>,
    pub aggregate: Vec<Linear>,
    pub aggregate_norm: Option<LayerNorm>,
    /// Untied output projection; `None` when tied to the embedding.
    pub classifier: Option<Linear>,
    pub classifier_bias: Option<ParamId>,
    pub phase: RotaryPhase,
}

/// Per-stream decode state: one retention state per decoder layer plus the
/// cached cross-attention keys and values.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub layers: Vec<RetentionState>,
    pub memory_kv: Vec<(Tensor, Tensor)>,
    pub step: usize,
    /// FLOPs spent on this stream so far.
    pub flops: FlopCounter,
}

impl DecodeState {
    /// Bytes of recurrent state carried between steps.
    pub fn state_bytes(&self) -> usize {
        self.layers.iter().map(RetentionState::nbytes).sum()
    }
}

impl FusionModel {
    pub fn new<R: Rng>(cfg: FusionConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, f, v) = (cfg.hidden, cfg.ff_size, cfg.vocab_size);
        let mut init = Init { store, rng };
        let input = Linear::new(&mut init, "fusion.input", cfg.d_m, h, true)?;
        let embed = init.normal("fusion.embed", &[v, h])?;
        let mut encoder = Vec::new();
        for n in 0..cfg.n_enc {
            let name = format!("fusion.enc{n}");
            encoder.push(EncoderLayer {
                norm_ft: LayerNorm::new(&mut init, &format!("{name}.norm_ft"), h)?,
                norm_ff: LayerNorm::new(&mut init, &format!("{name}.norm_ff"), h)?,
                ff: FeedForward::new(&mut init, &format!("{name}.ff"), h, f)?,
            });
        }
        let encoder_norm = if cfg.n_enc > 0 {
            Some(LayerNorm::new(&mut init, "fusion.enc_norm", h)?)
        } else {
            None
        };
        let mut decoder = Vec::new();
        for n in 0..cfg.n_dec {
            let name = format!("fusion.dec{n}");
            let lin = |init: &mut Init<'_, R>, part: &str, bias| {
                Linear::new(init, &format!("{name}.{part}"), h, h, bias)
            };
            decoder.push(DecoderLayer {
                norm_d: LayerNorm::new(&mut init, &format!("{name}.norm_d"), h)?,
                norm_ca: LayerNorm::new(&mut init, &format!("{name}.norm_ca"), h)?,
                norm_ff: LayerNorm::new(&mut init, &format!("{name}.norm_ff"), h)?,
                ret_q: lin(&mut init, "ret_q", false)?,
                ret_k: lin(&mut init, "ret_k", false)?,
                ret_v: lin(&mut init, "ret_v", false)?,
                ca_q: lin(&mut init, "ca_q", true)?,
                ca_k: lin(&mut init, "ca_k", true)?,
                ca_v: lin(&mut init, "ca_v", true)?,
                ca_o: lin(&mut init, "ca_o", true)?,
                ff: FeedForward::new(&mut init, &format!("{name}.ff"), h, f)?,
            });
        }
        let mut aggregate = Vec::new();
        for n in 0..cfg.n_dec {
            aggregate.push(Linear::new(&mut init, &format!("fusion.agg{n}"), h, h, false)?);
        }
        let aggregate_norm = if cfg.n_dec > 0 {
            Some(LayerNorm::new(&mut init, "fusion.agg_norm", h)?)
        } else {
            None
        };
        let (classifier, classifier_bias) = if cfg.tie_embeddings {
            (None, Some(init.zeros("fusion.cls.b", &[v])?))
        } else {
            (Some(Linear::new(&mut init, "fusion.cls", h, v, true)?), None)
        };
        let phase = RotaryPhase::new(h, cfg.theta_base)?;
        Ok(Self {
            cfg,
            input,
            embed,
            encoder,
            encoder_norm,
            decoder,
            aggregate,
            aggregate_norm,
            classifier,
            classifier_bias,
            phase,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.input.params();
        p.push(self.embed);
        for l in &self.encoder {
            p.extend(l.params());
        }
        p.extend(self.encoder_norm.iter().flat_map(LayerNorm::params));
        for l in &self.decoder {
            p.extend(l.params());
        }
        for a in &self.aggregate {
            p.extend(a.params());
        }
        p.extend(self.aggregate_norm.iter().flat_map(LayerNorm::params));
        p.extend(self.classifier.iter().flat_map(Linear::params));
        p.extend(self.classifier_bias);
        p
    }

    /// Itemized learnable scalar count.
    pub fn count_params(&self) -> ParamAudit {
        let (h, v) = (self.cfg.hidden, self.cfg.vocab_size);
        let mut items = vec![
            ("input".to_string(), self.input.num_params()),
            ("embed".to_string(), v * h),
        ];
        for (n, l) in self.encoder.iter().enumerate() {
            items.push((format!("encoder{n}"), l.num_params()));
        }
        if let Some(n) = &self.encoder_norm {
            items.push(("encoder_norm".into(), n.num_params()));
        }
        for (n, l) in self.decoder.iter().enumerate() {
            items.push((format!("decoder{n}"), l.num_params()));
        }
        if !self.aggregate.is_empty() {
            let agg: usize = self.aggregate.iter().map(Linear::num_params).sum();
            let norm = self.aggregate_norm.as_ref().map_or(0, LayerNorm::num_params);
            items.push(("aggregate".into(), agg + norm));
        }
        let cls = self.classifier.as_ref().map_or(v, Linear::num_params);
        items.push(("classifier".into(), cls));
        ParamAudit { items }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        ensure!(!tokens.is_empty(), Error::Contract("empty token sequence".into()));
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Domain(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn embed_tokens(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let h = self.cfg.hidden;
        let idx = tokens.iter().flat_map(|&t| (t * h)..(t * h + h)).collect();
        let e = tape.param(self.embed);
        tape.gather(e, idx, &[tokens.len(), h])
    }

    fn classify(&self, tape: &mut Tape<'_>, y: Var) -> Result<Var> {
        match (&self.classifier, self.classifier_bias) {
            (Some(c), _) => c.forward(tape, y),
            (None, Some(b)) => {
                let e = tape.param(self.embed);
                let z = tape.matmul_nt(y, e)?;
                let b = tape.param(b);
                tape.add_row(z, b)
            }
            (None, None) => unreachable!("classifier missing"),
        }
    }

    /// Image features `[|X|×d_m]` to the encoder output `[|X|×H]`.
    pub fn encode(&self, tape: &mut Tape<'_>, features: Var) -> Result<Var> {
        ensure!(
            tape.value(features).ndim() == 2 && tape.value(features).cols() == self.cfg.d_m,
            shape_err!(
                "features {:?} do not have width d_m={}",
                tape.shape(features),
                self.cfg.d_m
            )
        );
        let mut x = self.input.forward(tape, features)?;
        for l in &self.encoder {
            x = l.forward(tape, x)?;
        }
        match &self.encoder_norm {
            Some(n) => n.forward(tape, x),
            None => Ok(x),
        }
    }

    /// Teacher-forced logits `[T×V]` from an already encoded memory.
    pub fn decode_parallel(&self, tape: &mut Tape<'_>, memory: Var, tokens: &[usize]) -> Result<Var> {
        let mut y = self.embed_tokens(tape, tokens)?;
        let mut outs = Vec::with_capacity(self.decoder.len());
        for l in &self.decoder {
            let kv = l.memory_kv(tape, memory)?;
            let (next, _) = l.forward(
                tape,
                y,
                kv,
                DecoderMode::Parallel,
                &self.phase,
                self.cfg.gamma,
                self.cfg.heads,
            )?;
            y = next;
            outs.push(y);
        }
        let z = if outs.is_empty() {
            y
        } else {
            aggregate_layers(tape, &outs, &self.aggregate, self.aggregate_norm.as_ref())?
        };
        self.classify(tape, z)
    }

    /// Teacher-forced logits `[T×V]` for `tokens` given image features.
    pub fn forward(&self, tape: &mut Tape<'_>, features: Var, tokens: &[usize]) -> Result<Var> {
        let memory = self.encode(tape, features)?;
        self.decode_parallel(tape, memory, tokens)
    }

    /// Encodes features and caches per-layer cross-attention keys and values.
    pub fn start_decode(&self, store: &ParamStore, features: &Tensor) -> Result<DecodeState> {
        let mut tape = Tape::inference(store);
        let f = tape.constant(features.clone());
        let memory = self.encode(&mut tape, f)?;
        self.start_decode_from_memory(&mut tape, memory)
    }

    /// Like [`start_decode`](Self::start_decode) from an encoder output on
    /// `tape`; FLOPs already on the tape are charged to the stream.
    pub fn start_decode_from_memory(&self, tape: &mut Tape<'_>, memory: Var) -> Result<DecodeState> {
        let mut memory_kv = Vec::with_capacity(self.decoder.len());
        for l in &self.decoder {
            let (k, v) = l.memory_kv(tape, memory)?;
            memory_kv.push((tape.value(k).clone(), tape.value(v).clone()));
        }
        Ok(DecodeState {
            layers: vec![RetentionState::zeros(self.cfg.hidden); self.decoder.len()],
            memory_kv,
            step: 0,
            flops: tape.flops(),
        })
    }

    /// Consumes one token and returns the next-token logits `[V]`. Work per
    /// call is independent of how many tokens came before.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        state: &mut DecodeState,
        token: usize,
    ) -> Result<Tensor> {
        ensure!(
            state.layers.len() == self.decoder.len() && state.memory_kv.len() == self.decoder.len(),
            Error::Contract(format!(
                "decode state has {} layers, model has {}",
                state.layers.len(),
                self.decoder.len()
            ))
        );
        ensure!(
            state.layers.iter().all(|s| s.step == state.step),
            Error::Contract("layer states out of step".into())
        );
        let mut tape = Tape::inference(store);
        let mut y = self.embed_tokens(&mut tape, &[token])?;
        let mut outs = Vec::with_capacity(self.decoder.len());
        let mut next_states = Vec::with_capacity(self.decoder.len());
        for ((l, st), (k, v)) in self.decoder.iter().zip(&state.layers).zip(&state.memory_kv) {
            let kv = (tape.constant(k.clone()), tape.constant(v.clone()));
            let (next, s) = l.forward(
                &mut tape,
                y,
                kv,
                DecoderMode::Recurrent(st),
                &self.phase,
                self.cfg.gamma,
                self.cfg.heads,
            )?;
            y = next;
            outs.push(y);
            next_states.push(RetentionState {
                s: tape.value(s.expect("recurrent state")).clone(),
                step: st.step + 1,
            });
        }
        let z = if outs.is_empty() {
            y
        } else {
            aggregate_layers(&mut tape, &outs, &self.aggregate, self.aggregate_norm.as_ref())?
        };
        let logits = self.classify(&mut tape, z)?;
        state.layers = next_states;
        state.step += 1;
        state.flops += tape.flops();
        let v = self.cfg.vocab_size;
        tape.value(logits).clone().reshape(&[v])
    }

    fn ff_flops(&self, rows: usize) -> FlopCounter {
        let (h, f) = (self.cfg.hidden, self.cfg.ff_size);
        FlopCounter::matmul(rows, h, f) + FlopCounter::matmul(rows, f, h)
    }

    /// Encoder FLOPs; the decoders' cross-attention key/value projections are not included.
    pub fn encode_flops(&self, mem_len: usize) -> FlopCounter {
        let h = self.cfg.hidden;
        let mut total = FlopCounter::matmul(mem_len, self.cfg.d_m, h);
        for _ in &self.encoder {
            let (m, a) = ft_layer_flops(mem_len, h);
            total += FlopCounter { mul: m, add: a } + self.ff_flops(mem_len);
        }
        total
    }

    /// Cross-attention key/value projections of the memory, all decoder layers.
    pub fn memory_kv_flops(&self, mem_len: usize) -> FlopCounter {
        let h = self.cfg.hidden;
        FlopCounter::matmul(mem_len, h, h) * 2 * self.decoder.len() as u64
    }

    /// Decoder FLOPs of teacher-forced logits for `seq_len` tokens over `mem_len` memory rows,
    /// excluding the encoder.
    pub fn decode_parallel_flops(&self, mem_len: usize, seq_len: usize) -> FlopCounter {
        let (h, t) = (self.cfg.hidden, seq_len);
        let mut total = self.memory_kv_flops(mem_len);
        for _ in &self.decoder {
            total += retention_parallel_flops(t, h)
                + FlopCounter::matmul(t, h, h) * 2
                + attend_flops(t, mem_len, h)
                + self.ff_flops(t)
                + FlopCounter::matmul(t, h, h);
        }
        total + FlopCounter::matmul(t, h, self.cfg.vocab_size)
    }

    /// FLOPs of one [`decode_step`](Self::decode_step).
    pub fn decode_step_flops(&self, mem_len: usize) -> FlopCounter {
        let h = self.cfg.hidden;
        let mut total = FlopCounter::default();
        for _ in &self.decoder {
            total += retention_step_flops(h)
                + FlopCounter::matmul(1, h, h) * 2
                + attend_flops(1, mem_len, h)
                + self.ff_flops(1)
                + FlopCounter::matmul(1, h, h);
        }
        total + FlopCounter::matmul(1, h, self.cfg.vocab_size)
    }

    /// Teacher-forced forward FLOPs (encoder and decoder) under `convention`.
    pub fn estimate_flops(&self, mem_len: usize, seq_len: usize, convention: Convention) -> u64 {
        (self.encode_flops(mem_len) + self.decode_parallel_flops(mem_len, seq_len)).total(convention)
    }
}

/// Teacher-forced logits `[T×V]` on a forward-only tape.
pub fn fusion_forward(
    store: &ParamStore,
    model: &FusionModel,
    features: &Tensor,
    tokens: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::inference(store);
    let f = tape.constant(features.clone());
    let logits = model.forward(&mut tape, f, tokens)?;
    Ok(tape.value(logits).clone())
}
