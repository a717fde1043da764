//! Shifted-window Fourier backbone: patch embedding, stages of
//! `[windowed FT + feed-forward]` blocks with pre-norm residuals, and 2×2
//! patch merging between stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{FlopCounter, Tape, Var};
use crate::backbone::fourier::{wft_layer_flops, WindowGrid};
use crate::error::{ensure, shape_err, Error, Result};
use crate::nn::{FeedForward, Init, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwiftConfig {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    pub window: usize,
    pub shift_every_other: bool,
    pub ff_ratio: usize,
}

impl SwiftConfig {
    /// Desk-scale default: 3×32×32 input, 4×4 patches, 48 channels, two stages of two blocks.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            image_h: 32,
            image_w: 32,
            patch_size: 4,
            embed_dim: 48,
            stage_depths: vec![2, 2],
            window: 4,
            shift_every_other: true,
            ff_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        ensure!(
            p >= 1 && self.image_h % p == 0 && self.image_w % p == 0,
            shape_err!("image {}x{} not divisible by patch {p}", self.image_h, self.image_w)
        );
        ensure!(
            !self.stage_depths.is_empty() && self.embed_dim >= 1 && self.window >= 1,
            Error::Config("backbone needs at least one stage, embed_dim and window >= 1".into())
        );
        let (mut h, mut w) = (self.image_h / p, self.image_w / p);
        for _ in 1..self.stage_depths.len() {
            ensure!(
                h % 2 == 0 && w % 2 == 0,
                shape_err!("patch merge needs even token map, got {h}x{w}")
            );
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Token-map size entering each stage.
    pub fn stage_maps(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.image_h / self.patch_size, self.image_w / self.patch_size);
        let mut out = Vec::new();
        for s in 0..self.stage_depths.len() {
            if s > 0 {
                h /= 2;
                w /= 2;
            }
            out.push((h, w));
        }
        out
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Feature width `d_m` of the final token map.
    pub fn out_dim(&self) -> usize {
        self.stage_dim(self.stage_depths.len() - 1)
    }

    pub fn out_tokens(&self) -> usize {
        let (h, w) = *self.stage_maps().last().expect("validated");
        h * w
    }

    /// Window grid for block `block` of a stage whose token map is `h×w×c`.
    /// Windows larger than the map collapse to the whole map, unshifted.
    pub fn block_grid(&self, h: usize, w: usize, c: usize, block: usize) -> Result<WindowGrid> {
        let (wh, ww) = (self.window.min(h), self.window.min(w));
        let covers_map = wh == h && ww == w;
        let shift = if self.shift_every_other && block % 2 == 1 && !covers_map {
            (wh / 2, ww / 2)
        } else {
            (0, 0)
        };
        WindowGrid::new(h, w, c, wh, ww, shift)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm_mix: LayerNorm,
    norm_ff: LayerNorm,
    ff: FeedForward,
    grid: WindowGrid,
}

#[derive(Clone, Debug)]
struct Stage {
    merge: Option<Linear>,
    blocks: Vec<Block>,
}

/// Parameter layout of the backbone inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SwiftBackbone {
    pub cfg: SwiftConfig,
    patch: Linear,
    stages: Vec<Stage>,
    final_norm: LayerNorm,
}

impl SwiftBackbone {
    pub fn new<R: Rng>(cfg: SwiftConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init { store, rng };
        let p = cfg.patch_size;
        let patch = Linear::new(
            &mut init,
            "backbone.patch",
            cfg.in_channels * p * p,
            cfg.embed_dim,
            true,
        )?;
        let mut stages = Vec::new();
        for (s, (&depth, &(h, w))) in cfg.stage_depths.iter().zip(&cfg.stage_maps()).enumerate() {
            let c = cfg.stage_dim(s);
            let merge = if s > 0 {
                Some(Linear::new(&mut init, &format!("backbone.s{s}.merge"), 2 * c, c, false)?)
            } else {
                None
            };
            let mut blocks = Vec::new();
            for b in 0..depth {
                let name = format!("backbone.s{s}.b{b}");
                blocks.push(Block {
                    norm_mix: LayerNorm::new(&mut init, &format!("{name}.norm_mix"), c)?,
                    norm_ff: LayerNorm::new(&mut init, &format!("{name}.norm_ff"), c)?,
                    ff: FeedForward::new(&mut init, &format!("{name}.ff"), c, c * cfg.ff_ratio)?,
                    grid: cfg.block_grid(h, w, c, b)?,
                });
            }
            stages.push(Stage { merge, blocks });
        }
        let final_norm = LayerNorm::new(&mut init, "backbone.norm", cfg.out_dim())?;
        Ok(Self {
            cfg,
            patch,
            stages,
            final_norm,
        })
    }

    pub fn patch_weight(&self) -> ParamId {
        self.patch.weight
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.patch.params();
        for st in &self.stages {
            if let Some(m) = &st.merge {
                p.extend(m.params());
            }
            for b in &st.blocks {
                p.extend(b.norm_mix.params());
                p.extend(b.norm_ff.params());
                p.extend(b.ff.params());
            }
        }
        p.extend(self.final_norm.params());
        p
    }

    /// Non-overlapping `p×p` patches of a `C×H×W` image, linearly projected to `embed_dim`.
    pub fn patch_embed(&self, tape: &mut Tape<'_>, img: Var) -> Result<Var> {
        let cfg = &self.cfg;
        ensure!(
            tape.shape(img) == [cfg.in_channels, cfg.image_h, cfg.image_w],
            shape_err!(
                "image {:?} does not match backbone input {}x{}x{}",
                tape.shape(img),
                cfg.in_channels,
                cfg.image_h,
                cfg.image_w
            )
        );
        let idx = patch_indices(cfg.in_channels, cfg.image_h, cfg.image_w, cfg.patch_size)?;
        let rows = (cfg.image_h / cfg.patch_size) * (cfg.image_w / cfg.patch_size);
        let cols = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let patches = tape.gather(img, idx, &[rows, cols])?;
        self.patch.forward(tape, patches)
    }

    /// Image `C×H×W` to the flattened final token map `[|X|×d_m]`.
    pub fn forward(&self, tape: &mut Tape<'_>, img: Var) -> Result<Var> {
        let mut x = self.patch_embed(tape, img)?;
        let maps = self.cfg.stage_maps();
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(merge) = &stage.merge {
                let (h, w) = maps[s - 1];
                x = patch_merge(tape, x, h, w, merge)?;
            }
            for block in &stage.blocks {
                let n = block.norm_mix.forward(tape, x)?;
                let mixed = tape.wft(n, &block.grid)?;
                x = tape.add(x, mixed)?;
                let n = block.norm_ff.forward(tape, x)?;
                let f = block.ff.forward(tape, n)?;
                x = tape.add(x, f)?;
            }
        }
        self.final_norm.forward(tape, x)
    }

    /// Forward FLOPs of one image, matching the tape counter.
    pub fn flops(&self) -> FlopCounter {
        let cfg = &self.cfg;
        let maps = cfg.stage_maps();
        let (h0, w0) = maps[0];
        let mut total = FlopCounter::matmul(h0 * w0, self.patch.fan_in, cfg.embed_dim);
        for (s, stage) in self.stages.iter().enumerate() {
            let (h, w) = maps[s];
            let c = cfg.stage_dim(s);
            if stage.merge.is_some() {
                total += FlopCounter::matmul(h * w, 2 * c, c);
            }
            for block in &stage.blocks {
                let (m, a) = wft_layer_flops(&block.grid);
                total += FlopCounter { mul: m, add: a };
                let f = c * cfg.ff_ratio;
                total += FlopCounter::matmul(h * w, c, f) + FlopCounter::matmul(h * w, f, c);
            }
        }
        total
    }
}

/// Flat gather indices turning a `C×H×W` image into `[(H/p·W/p) × (C·p·p)]`
/// patch rows; features within a patch are ordered `(c, dy, dx)`.
pub fn patch_indices(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    ensure!(
        p >= 1 && h % p == 0 && w % p == 0,
        shape_err!("image {h}x{w} not divisible by patch {p}")
    );
    let mut idx = Vec::with_capacity(c * h * w);
    for py in 0..h / p {
        for px in 0..w / p {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(ch * h * w + (py * p + dy) * w + px * p + dx);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Flat gather indices concatenating each 2×2 neighborhood of an `h×w×c`
/// token map into `[(h/2·w/2) × 4c]`, in the order (0,0), (1,0), (0,1), (1,1).
pub fn merge_indices(h: usize, w: usize, c: usize) -> Result<Vec<usize>> {
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        shape_err!("patch merge needs even dims, got {h}x{w}")
    );
    let mut idx = Vec::with_capacity(h * w * c);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let tok = (y + dy) * w + x + dx;
                idx.extend(tok * c..(tok + 1) * c);
            }
        }
    }
    Ok(idx)
}

/// `[(h·w)×C] → [(h/2·w/2)×2C]`: concatenate 2×2 neighborhoods, project `4C → 2C`.
pub fn patch_merge(tape: &mut Tape<'_>, x: Var, h: usize, w: usize, proj: &Linear) -> Result<Var> {
    let c = tape.value(x).cols();
    ensure!(
        tape.shape(x) == [h * w, c],
        shape_err!("token map {:?} is not {h}x{w}", tape.shape(x))
    );
    let idx = merge_indices(h, w, c)?;
    let cat = tape.gather(x, idx, &[(h / 2) * (w / 2), 4 * c])?;
    proj.forward(tape, cat)
}

/// Convenience: run the backbone on one image without recording gradients.
pub fn swift_forward(store: &ParamStore, backbone: &SwiftBackbone, img: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference(store);
    let x = tape.constant(img.clone());
    let y = backbone.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}
