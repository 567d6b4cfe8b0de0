//! Dual-branch temporal encoders producing the semantic and boundary
//! conditions for the denoiser.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{apply_dropout, attention, Dropout, TemporalConv, MASK_BIAS};
use crate::nn::{FrameMask, Init, Linear, Padding, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalEncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    /// 1-based layer indices whose outputs are concatenated into the condition.
    pub tap_layers: Vec<usize>,
    /// Base attention window; layer `l` uses `min(T, 2^(l-1) * window_base)`.
    pub window_base: usize,
    pub dropout: f64,
}

impl Default for TemporalEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 96,
            tap_layers: vec![2, 4, 6],
            window_base: 16,
            dropout: 0.1,
        }
    }
}

impl TemporalEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden < 8 || self.window_base == 0 {
            return Err(Error::Config(
                "encoder needs layers >= 1, hidden >= 8 and a positive window".into(),
            ));
        }
        if self.tap_layers.is_empty() || self.tap_layers.iter().any(|&l| l == 0 || l > self.layers) {
            return Err(Error::Config(format!(
                "tap layers {:?} must be a non-empty subset of 1..={}",
                self.tap_layers, self.layers
            )));
        }
        let mut sorted = self.tap_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.tap_layers.len() {
            return Err(Error::Config("tap layers must be distinct".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Width of the concatenated tap features.
    pub fn condition_width(&self) -> usize {
        self.tap_layers.len() * self.hidden
    }

    pub fn dilation(&self, layer: usize) -> usize {
        1 << (layer - 1)
    }

    pub fn window(&self, layer: usize, frames: usize) -> usize {
        (self.window_base << (layer - 1)).min(frames)
    }
}

/// Receptive field of a stack of kernel-3 convolutions with dilations
/// `1, 2, .., 2^(layers-1)`.
pub fn receptive_field(layers: usize) -> usize {
    1 + 2 * ((1usize << layers) - 1)
}

/// Additive `(T, T)` bias for block-local attention: frames are grouped into
/// blocks of `window`; block `b` sees keys in
/// `[b*window - window/2, (b+1)*window + window/2)`.
pub fn window_bias(frames: usize, window: usize, dtype: DType, device: &Device) -> Result<Option<Tensor>> {
    if window >= frames {
        return Ok(None);
    }
    let half = window / 2;
    let mut values = vec![0f32; frames * frames];
    for q in 0..frames {
        let block = q / window;
        let lo = (block * window).saturating_sub(half);
        let hi = (block + 1) * window + half;
        for k in 0..frames {
            if k < lo || k >= hi {
                values[q * frames + k] = MASK_BIAS as f32;
            }
        }
    }
    Ok(Some(
        Tensor::from_vec(values, (1, frames, frames), device)?.to_dtype(dtype)?,
    ))
}

/// One encoder layer: dilated conv, GELU, single-head windowed attention and a
/// residual connection.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub conv: TemporalConv,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub index: usize,
}

impl EncoderLayer {
    pub fn new(scope: &Scope, cfg: &TemporalEncoderConfig, index: usize) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            conv: TemporalConv::new(&scope.pp("conv"), h, h, 3, cfg.dilation(index), Init::FanIn(3 * h))?,
            q: Linear::new(&scope.pp("q"), h, h, Init::FanIn(h))?,
            k: Linear::new(&scope.pp("k"), h, h, Init::FanIn(h))?,
            v: Linear::new(&scope.pp("v"), h, h, Init::FanIn(h))?,
            out: Linear::new(&scope.pp("out"), h, h, Init::FanIn(h))?,
            index,
        })
    }

    /// Convolution sub-path, before attention.
    pub fn conv_path(&self, x: &Tensor, mask: Option<&FrameMask>, padding: Padding) -> Result<Tensor> {
        let x = match mask {
            Some(m) => m.apply(x)?,
            None => x.clone(),
        };
        Ok(self.conv.forward(&x, padding)?.gelu_erf()?)
    }

    /// Returns the post-residual output (before dropout).
    pub fn forward(
        &self,
        x: &Tensor,
        cfg: &TemporalEncoderConfig,
        mask: Option<&FrameMask>,
        padding: Padding,
    ) -> Result<Tensor> {
        let frames = x.dim(1)?;
        let h = self.conv_path(x, mask, padding)?;
        let q = self.q.forward(&h)?.unsqueeze(1)?;
        let k = self.k.forward(&h)?.unsqueeze(1)?;
        let v = self.v.forward(&h)?.unsqueeze(1)?;
        let window = window_bias(frames, cfg.window(self.index, frames), x.dtype(), x.device())?;
        let bias = match (window, mask) {
            (Some(w), Some(m)) => Some(w.unsqueeze(0)?.broadcast_add(&m.key_bias()?)?),
            (Some(w), None) => Some(w.unsqueeze(0)?),
            (None, Some(m)) => Some(m.key_bias()?),
            (None, None) => None,
        };
        let a = attention(&q, &k, &v, bias.as_ref())?.squeeze(1)?;
        Ok((x + self.out.forward(&a)?)?)
    }
}

/// Output of one branch for a batch: `features` is `(B, T, taps*H)` and
/// `logits` is `(B, T, out)`.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub features: Tensor,
    pub logits: Tensor,
}

/// Input projection, a stack of encoder layers and a linear head on the final
/// layer output.
#[derive(Debug, Clone)]
pub struct EncoderBranch {
    pub cfg: TemporalEncoderConfig,
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

impl EncoderBranch {
    pub fn new(scope: &Scope, cfg: &TemporalEncoderConfig, in_dim: usize, out_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let layers = (1..=cfg.layers)
            .map(|l| EncoderLayer::new(&scope.pp("layer").pp(l), cfg, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            input: Linear::new(&scope.pp("input"), in_dim, cfg.hidden, Init::FanIn(in_dim))?,
            layers,
            head: Linear::new(&scope.pp("head"), cfg.hidden, out_dim, Init::FanIn(cfg.hidden))?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&FrameMask>, dropout: &mut Option<Dropout>) -> Result<BranchOutput> {
        self.forward_padded(x, mask, dropout, Padding::Zero)
    }

    pub fn forward_padded(
        &self,
        x: &Tensor,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
        padding: Padding,
    ) -> Result<BranchOutput> {
        let mut h = self.input.forward(x)?;
        // Layers run in index order, so taps come out sorted by layer.
        let mut taps = Vec::with_capacity(self.cfg.tap_layers.len());
        for layer in &self.layers {
            let out = layer.forward(&h, &self.cfg, mask, padding)?;
            if self.cfg.tap_layers.contains(&layer.index) {
                taps.push(out.clone());
            }
            h = apply_dropout(&out, dropout)?;
        }
        Ok(BranchOutput {
            features: Tensor::cat(&taps, 2)?,
            logits: self.head.forward(&h)?,
        })
    }
}

/// Semantic and boundary conditions for a batch.
#[derive(Debug, Clone)]
pub struct ConditionPair {
    pub c_sem: Tensor,
    pub c_bound: Tensor,
    pub sem_logits: Tensor,
    pub bound_logits: Tensor,
}

impl ConditionPair {
    pub fn frames(&self) -> Result<usize> {
        Ok(self.c_sem.dim(1)?)
    }

    /// Batch element `i` as a batch of one.
    pub fn item(&self, i: usize) -> Result<Self> {
        Ok(Self {
            c_sem: self.c_sem.narrow(0, i, 1)?,
            c_bound: self.c_bound.narrow(0, i, 1)?,
            sem_logits: self.sem_logits.narrow(0, i, 1)?,
            bound_logits: self.bound_logits.narrow(0, i, 1)?,
        })
    }

    /// Gradient-free copy, used once conditions are cached for sampling.
    pub fn detach(&self) -> Self {
        Self {
            c_sem: self.c_sem.detach(),
            c_bound: self.c_bound.detach(),
            sem_logits: self.sem_logits.detach(),
            bound_logits: self.bound_logits.detach(),
        }
    }
}

/// The two independent branches.
#[derive(Debug, Clone)]
pub struct ConditionEncoders {
    pub semantic: EncoderBranch,
    pub boundary: EncoderBranch,
}

impl ConditionEncoders {
    pub fn new(scope: &Scope, cfg: &TemporalEncoderConfig, feature_dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            semantic: EncoderBranch::new(&scope.pp("sem"), cfg, feature_dim, classes)?,
            boundary: EncoderBranch::new(&scope.pp("bound"), cfg, feature_dim, 1)?,
        })
    }

    pub fn encode_semantic(
        &self,
        x: &Tensor,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
    ) -> Result<BranchOutput> {
        self.semantic.forward(x, mask, dropout)
    }

    pub fn encode_boundary(
        &self,
        x: &Tensor,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
    ) -> Result<BranchOutput> {
        self.boundary.forward(x, mask, dropout)
    }

    /// `x` is fused features `(B, T, D)`.
    pub fn forward(
        &self,
        x: &Tensor,
        mask: Option<&FrameMask>,
        dropout: &mut Option<Dropout>,
    ) -> Result<ConditionPair> {
        let sem = self.encode_semantic(x, mask, dropout)?;
        let bound = self.encode_boundary(x, mask, dropout)?;
        Ok(ConditionPair {
            c_sem: sem.features,
            c_bound: bound.features,
            sem_logits: sem.logits,
            bound_logits: bound.logits,
        })
    }
}
