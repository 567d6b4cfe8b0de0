//! The conditional denoiser: timestep injection, a stack of hybrid
//! semantic/boundary blocks and the label head.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::condition::ConditionPair;
use crate::diffusion::sinusoidal_batch;
use crate::error::{Error, Result};
use crate::nn::layers::{apply_dropout, attention, merge_heads, split_heads, Dropout, LayerNorm, TemporalConv};
use crate::nn::{FrameMask, Init, Linear, Padding, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            width: 128,
            heads: 4,
            kernel: 3,
            ffn_mult: 4,
            dropout: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("denoiser needs at least one block".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "width {} must be even and divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.kernel.is_multiple_of(2) || self.ffn_mult == 0 {
            return Err(Error::Config("kernel must be odd and ffn_mult positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Intermediate activations of one block, for probes and debug dumps.
#[derive(Debug, Clone)]
pub struct BlockTaps {
    pub boundary: Tensor,
    pub value: Tensor,
    pub semantic: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct HybridBlock {
    pub bound_proj: Linear,
    pub conv: TemporalConv,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub attn_out: Linear,
    pub norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
}

impl HybridBlock {
    pub fn new(scope: &Scope, cfg: &DenoiserConfig) -> Result<Self> {
        let d = cfg.width;
        let hidden = cfg.ffn_mult * d;
        Ok(Self {
            bound_proj: Linear::new(&scope.pp("bound_proj"), 2 * d, d, Init::FanIn(2 * d))?,
            conv: TemporalConv::new(&scope.pp("conv"), d, d, cfg.kernel, 1, Init::FanIn(cfg.kernel * d))?,
            q: Linear::new(&scope.pp("q"), 2 * d, d, Init::FanIn(2 * d))?,
            k: Linear::new(&scope.pp("k"), 2 * d, d, Init::FanIn(2 * d))?,
            v: Linear::new(&scope.pp("v"), d, d, Init::FanIn(d))?,
            attn_out: Linear::new(&scope.pp("attn_out"), d, d, Init::FanIn(d))?,
            norm: LayerNorm::new(&scope.pp("norm"), d)?,
            ffn_in: Linear::new(&scope.pp("ffn_in"), d, hidden, Init::FanIn(d))?,
            // Zero output layer: a fresh block is the identity map.
            ffn_out: Linear::new(&scope.pp("ffn_out"), hidden, d, Init::Zeros)?,
            heads: cfg.heads,
        })
    }

    pub fn forward(
        &self,
        z: &Tensor,
        c_sem: &Tensor,
        c_bound: &Tensor,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
    ) -> Result<Tensor> {
        Ok(self.forward_with_taps(z, c_sem, c_bound, mask, dropout)?.output)
    }

    pub fn forward_with_taps(
        &self,
        z: &Tensor,
        c_sem: &Tensor,
        c_bound: &Tensor,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
    ) -> Result<BlockTaps> {
        if z.dims() != c_sem.dims() || z.dims() != c_bound.dims() {
            return Err(Error::Shape(format!(
                "block inputs disagree: z {:?}, sem {:?}, bound {:?}",
                z.dims(),
                c_sem.dims(),
                c_bound.dims()
            )));
        }
        // Boundary path: local interactions via convolution.
        let b_in = self.bound_proj.forward(&Tensor::cat(&[z, c_bound], 2)?)?;
        let b_in = match mask {
            Some(m) => m.apply(&b_in)?,
            None => b_in,
        };
        let boundary = self.conv.forward(&b_in, Padding::Zero)?;

        // Semantic path: conditions shape queries and keys, values come from z.
        let qk_in = Tensor::cat(&[z, c_sem], 2)?;
        let q = split_heads(&self.q.forward(&qk_in)?, self.heads)?;
        let k = split_heads(&self.k.forward(&qk_in)?, self.heads)?;
        let value = self.v.forward(z)?;
        let v = split_heads(&value, self.heads)?;
        let bias = mask.map(|m| m.key_bias()).transpose()?;
        let a = merge_heads(&attention(&q, &k, &v, bias.as_ref())?)?;
        let semantic = self.attn_out.forward(&a)?;

        let merged = (&boundary + &semantic)?;
        let h = self.ffn_in.forward(&self.norm.forward(&merged)?)?.gelu_erf()?;
        let h = apply_dropout(&h, dropout)?;
        let output = (z + self.ffn_out.forward(&h)?)?;
        Ok(BlockTaps {
            boundary,
            value,
            semantic,
            output,
        })
    }
}

/// Timestep features: sinusoid, linear, SiLU, linear (zero-initialised).
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl TimeEmbedding {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), dim, dim, Init::FanIn(dim))?,
            fc2: Linear::new(&scope.pp("fc2"), dim, dim, Init::Zeros)?,
            dim,
        })
    }

    /// `(B,)` steps -> `(B, 1, dim)`.
    pub fn forward(&self, t: &[usize], like: &Tensor) -> Result<Tensor> {
        let s = sinusoidal_batch(t, self.dim, like.dtype(), like.device())?;
        let h = candle_nn::ops::silu(&self.fc1.forward(&s)?)?;
        Ok(self.fc2.forward(&h)?.unsqueeze(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub y0: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub sem_in: Linear,
    pub bound_in: Linear,
    pub time: TimeEmbedding,
    pub blocks: Vec<HybridBlock>,
    pub out: Linear,
    pub head: Linear,
}

impl Denoiser {
    pub fn new(scope: &Scope, cfg: &DenoiserConfig, cond_width: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let blocks = (0..cfg.blocks)
            .map(|i| HybridBlock::new(&scope.pp("block").pp(i), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            sem_in: Linear::new(&scope.pp("sem_in"), cond_width, d, Init::FanIn(cond_width))?,
            bound_in: Linear::new(&scope.pp("bound_in"), cond_width, d, Init::FanIn(cond_width))?,
            time: TimeEmbedding::new(&scope.pp("time"), d)?,
            blocks,
            out: Linear::new(&scope.pp("out"), d, d, Init::Identity)?,
            head: Linear::new(&scope.pp("head"), d, classes, Init::FanIn(d))?,
        })
    }

    /// Projected conditions `(C_sem', C_bound')`.
    pub fn project_conditions(&self, conds: &ConditionPair) -> Result<(Tensor, Tensor)> {
        Ok((
            self.sem_in.forward(&conds.c_sem)?,
            self.bound_in.forward(&conds.c_bound)?,
        ))
    }

    /// `y_t` `(B, T, d)` with one step per batch element.
    pub fn forward(
        &self,
        y_t: &Tensor,
        t: &[usize],
        conds: &ConditionPair,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
    ) -> Result<DenoiserOutput> {
        let (out, _) = self.run(y_t, t, conds, mask, dropout, false)?;
        Ok(out)
    }

    pub fn forward_with_taps(
        &self,
        y_t: &Tensor,
        t: &[usize],
        conds: &ConditionPair,
        mask: Option<&FrameMask>,
    ) -> Result<(DenoiserOutput, Vec<BlockTaps>)> {
        self.run(y_t, t, conds, mask, &mut None, true)
    }

    /// Same as `forward` but with pre-projected conditions, so sampling can
    /// reuse them across steps.
    pub fn forward_projected(
        &self,
        y_t: &Tensor,
        t: &[usize],
        c_sem: &Tensor,
        c_bound: &Tensor,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
    ) -> Result<DenoiserOutput> {
        let mut z = y_t.broadcast_add(&self.time.forward(t, y_t)?)?;
        for block in &self.blocks {
            z = block.forward(&z, c_sem, c_bound, mask, dropout)?;
        }
        self.decode(&z)
    }

    fn decode(&self, z: &Tensor) -> Result<DenoiserOutput> {
        let y0 = self.out.forward(z)?;
        let logits = self.head.forward(&y0)?;
        Ok(DenoiserOutput { y0, logits })
    }

    fn run(
        &self,
        y_t: &Tensor,
        t: &[usize],
        conds: &ConditionPair,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
        keep_taps: bool,
    ) -> Result<(DenoiserOutput, Vec<BlockTaps>)> {
        if y_t.dim(D::Minus1)? != self.cfg.width || y_t.dim(1)? != conds.frames()? {
            return Err(Error::Shape(format!(
                "y_t {:?} does not match width {} and {} condition frames",
                y_t.dims(),
                self.cfg.width,
                conds.frames()?
            )));
        }
        if t.len() != y_t.dim(0)? {
            return Err(Error::Shape(format!("{} steps for batch {}", t.len(), y_t.dim(0)?)));
        }
        let (c_sem, c_bound) = self.project_conditions(conds)?;
        if !keep_taps {
            return Ok((self.forward_projected(y_t, t, &c_sem, &c_bound, mask, dropout)?, vec![]));
        }
        let mut z = y_t.broadcast_add(&self.time.forward(t, y_t)?)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let tap = block.forward_with_taps(&z, &c_sem, &c_bound, mask, dropout)?;
            z = tap.output.clone();
            taps.push(tap);
        }
        Ok((self.decode(&z)?, taps))
    }
}
