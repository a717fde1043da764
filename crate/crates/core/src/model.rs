//! The full captioner: optional image backbone feeding the fusion model,
//! with all parameters held in one store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{SwiftBackbone, SwiftConfig};
use crate::error::{ensure, Error, Result};
use crate::fusion::{DecodeState, FusionConfig, FusionModel, ParamAudit};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwifterConfig {
    /// Without a backbone the model consumes precomputed `[|X|×d_m]` features.
    pub backbone: Option<SwiftConfig>,
    pub fusion: FusionConfig,
}

impl SwifterConfig {
    /// Desk backbone feeding the two-plus-two layer fusion model.
    pub fn desk(vocab_size: usize) -> Self {
        let backbone = SwiftConfig::desk();
        let fusion = FusionConfig::desk(backbone.out_dim(), vocab_size);
        Self {
            backbone: Some(backbone),
            fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = &self.backbone {
            b.validate()?;
            ensure!(
                b.out_dim() == self.fusion.d_m,
                Error::Config(format!(
                    "backbone output width {} does not match fusion d_m {}",
                    b.out_dim(),
                    self.fusion.d_m
                ))
            );
        }
        self.fusion.validate()
    }

    /// Rows of encoder memory per image, when a backbone is present.
    pub fn memory_len(&self) -> Option<usize> {
        self.backbone.as_ref().map(SwiftConfig::out_tokens)
    }
}

#[derive(Clone, Debug)]
pub struct Swifter {
    pub cfg: SwifterConfig,
    pub store: ParamStore,
    pub backbone: Option<SwiftBackbone>,
    pub fusion: FusionModel,
}

impl Swifter {
    /// Fresh model with weights drawn from a generator seeded by `seed`.
    pub fn new(cfg: SwifterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = match &cfg.backbone {
            Some(b) => Some(SwiftBackbone::new(b.clone(), &mut store, &mut rng)?),
            None => None,
        };
        let fusion = FusionModel::new(cfg.fusion.clone(), &mut store, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            backbone,
            fusion,
        })
    }

    /// Image (or feature matrix without a backbone) to fusion input features.
    pub fn features(&self, tape: &mut Tape<'_>, input: Var) -> Result<Var> {
        match &self.backbone {
            Some(b) => b.forward(tape, input),
            None => Ok(input),
        }
    }

    /// Teacher-forced logits `[T×V]`.
    pub fn logits(&self, tape: &mut Tape<'_>, input: Var, tokens: &[usize]) -> Result<Var> {
        let f = self.features(tape, input)?;
        self.fusion.forward(tape, f, tokens)
    }

    /// Teacher-forced logits on a forward-only tape.
    pub fn forward(&self, input: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let x = tape.constant(input.clone());
        let l = self.logits(&mut tape, x, tokens)?;
        Ok(tape.value(l).clone())
    }

    /// Runs the backbone and encoder once and returns a fresh decode stream.
    pub fn start_decode(&self, input: &Tensor) -> Result<DecodeState> {
        let mut tape = Tape::inference(&self.store);
        let x = tape.constant(input.clone());
        let f = self.features(&mut tape, x)?;
        let memory = self.fusion.encode(&mut tape, f)?;
        self.fusion.start_decode_from_memory(&mut tape, memory)
    }

    pub fn decode_step(&self, state: &mut DecodeState, token: usize) -> Result<Tensor> {
        self.fusion.decode_step(&self.store, state, token)
    }

    pub fn count_params(&self) -> ParamAudit {
        let mut audit = self.fusion.count_params();
        if let Some(b) = &self.backbone {
            let n = b.params().iter().map(|&id| self.store.get(id).numel()).sum();
            audit.items.insert(0, ("backbone".into(), n));
        }
        audit
    }
}
