//! Differentiable building blocks over `(batch, frames, channels)` tensors.
//!
//! Only primitive candle ops with backward rules are used (matmul, narrow,
//! cat, exp, ...), so every block can be gradient-checked at f64.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, Scope};
use crate::error::{Error, Result};

/// Large negative additive bias for masked attention logits. `exp` of this
/// underflows to exactly zero at f32 and f64.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// `weight` is `(out, in)`.
    pub fn new(scope: &Scope, input: usize, output: usize, init: Init) -> Result<Self> {
        let weight = scope.get("weight", &[output, input], init)?;
        let bias_init = match init {
            Init::FanIn(_) => Init::FanIn(input),
            _ => Init::Zeros,
        };
        let bias = scope.get("bias", &[output], bias_init)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match *x.dims() {
            [b, t, k] => x.reshape((b * t, k))?.matmul(&w)?.reshape((b, t, ()))?,
            _ => x.matmul(&w)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalisation over the channel axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.get("gamma", &[dim], Init::Ones)?,
            beta: scope.get("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Wrap-around; only used to probe temporal equivariance.
    Circular,
}

/// Temporal convolution with an odd kernel, expressed as a linear map over the
/// channel-concatenated taps `[x(t - r*d), .., x(t), .., x(t + r*d)]`.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub proj: Linear,
    pub kernel: usize,
    pub dilation: usize,
}

impl TemporalConv {
    pub fn new(scope: &Scope, input: usize, output: usize, kernel: usize, dilation: usize, init: Init) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("temporal kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            proj: Linear::new(scope, kernel * input, output, init)?,
            kernel,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor, padding: Padding) -> Result<Tensor> {
        let taps = shifted_taps(x, self.kernel, self.dilation, padding)?;
        self.proj.forward(&taps)
    }
}

/// `(B, T, C)` -> `(B, T, kernel*C)` holding `x(t + j*d)` for
/// `j = -r..=r`, `r = kernel / 2`, oldest offset first.
pub fn shifted_taps(x: &Tensor, kernel: usize, d: usize, padding: Padding) -> Result<Tensor> {
    let t = x.dim(1)?;
    let r = kernel / 2;
    let mut taps = Vec::with_capacity(kernel);
    match padding {
        Padding::Zero => {
            let padded = x.pad_with_zeros(1, r * d, r * d)?;
            for j in 0..kernel {
                taps.push(padded.narrow(1, j * d, t)?);
            }
        }
        Padding::Circular => {
            for j in 0..kernel {
                // Tap j reads x((t + (j - r) d) mod T).
                let shift = ((j as isize - r as isize) * d as isize).rem_euclid(t as isize) as usize;
                taps.push(if shift == 0 {
                    x.clone()
                } else {
                    Tensor::cat(&[x.narrow(1, shift, t - shift)?, x.narrow(1, 0, shift)?], 1)?
                });
            }
        }
    }
    Ok(Tensor::cat(&taps, 2)?)
}

/// Scaled dot-product attention. `q, k, v` are `(B, H, T, dh)`; `bias` is
/// broadcastable to `(B, H, T, T)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    let scores = match bias {
        Some(b) => scores.broadcast_add(b)?,
        None => scores,
    };
    let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(probs.matmul(v)?)
}

/// `(B, T, C)` -> `(B, heads, T, C / heads)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    Ok(x.reshape((b, t, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * dh))?)
}

/// Frame-validity mask for a padded batch: `(B, T)` with 1 on real frames.
#[derive(Debug, Clone)]
pub struct FrameMask {
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl FrameMask {
    pub fn new(lengths: &[usize], max_len: usize, dtype: DType, device: &Device) -> Result<Self> {
        let values: Vec<f32> = lengths
            .iter()
            .flat_map(|&l| (0..max_len).map(move |t| if t < l { 1.0 } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(values, (lengths.len(), max_len), device)?.to_dtype(dtype)?;
        Ok(Self {
            mask,
            lengths: lengths.to_vec(),
        })
    }

    pub fn is_full(&self) -> bool {
        let max = self.mask.dims()[1];
        self.lengths.iter().all(|&l| l == max)
    }

    /// Zeroes padded frames of a `(B, T, C)` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.mask.unsqueeze(2)?)?)
    }

    /// `(B, 1, 1, T)` additive bias that hides padded keys.
    pub fn key_bias(&self) -> Result<Tensor> {
        let b = ((self.mask.ones_like()? - &self.mask)? * MASK_BIAS)?;
        Ok(b.unsqueeze(1)?.unsqueeze(1)?)
    }

    pub fn valid_frames(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Inverted dropout with masks drawn from a seeded stream.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let n = x.elem_count();
        let values: Vec<f32> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    (1.0 / keep) as f32
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(values, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

pub fn apply_dropout(x: &Tensor, dropout: &mut Option<Dropout>) -> Result<Tensor> {
    match dropout {
        Some(d) => d.apply(x),
        None => Ok(x.clone()),
    }
}
