//! Noise schedule, label embedding, forward corruption, timestep features and
//! the DDIM sampler.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_encoder::argmax;
use crate::nn::{Init, Scope};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal coefficients `bar_alpha[t]`, `t = 0..=S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub bar_alpha: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule `f(t)/f(0)` with `f(t) = cos^2(((t/S + s)/(1 + s)) pi/2)`.
    /// Where the implied per-step beta would exceed 0.999 it is clipped, and
    /// the cumulative product continues from the clipped value.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut bar_alpha = Vec::with_capacity(steps + 1);
        bar_alpha.push(1.0);
        for t in 1..=steps {
            let beta = 1.0 - f(t) / f(t - 1);
            let value = if beta > MAX_BETA {
                bar_alpha[t - 1] * (1.0 - MAX_BETA)
            } else {
                f(t) / f0
            };
            bar_alpha.push(value);
        }
        Ok(Self { steps, bar_alpha })
    }

    pub fn bar_alpha(&self, t: usize) -> f64 {
        self.bar_alpha[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.bar_alpha[t];
        a / (1.0 - a)
    }

    /// Descending DDIM grid `t_k = round(k S / K)` for `k = K..1`.
    pub fn ddim_timesteps(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.steps {
            return Err(Error::Config(format!(
                "sampling steps must lie in 1..={}, got {k}",
                self.steps
            )));
        }
        Ok((1..=k).rev().map(|i| (i * self.steps + k / 2) / k).collect())
    }
}

/// Learnable `c x d` table; rows are RMS-normalised and scaled on lookup.
#[derive(Debug, Clone)]
pub struct LabelEmbedding {
    pub table: Tensor,
    pub scale: f64,
}

impl LabelEmbedding {
    pub fn new(scope: &Scope, classes: usize, dim: usize, scale: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::Config("signal scale must be positive".into()));
        }
        Ok(Self {
            table: scope.get("table", &[classes, dim], Init::Normal(1.0))?,
            scale,
        })
    }

    /// `scale * row / rms(row)` for every class, `(c, d)`.
    pub fn normalized(&self) -> Result<Tensor> {
        let rms = self.table.sqr()?.mean_keepdim(D::Minus1)?.sqrt()?;
        Ok((self.table.broadcast_div(&rms)? * self.scale)?)
    }

    /// `(B, T)` u32 ids -> `(B, T, d)`.
    pub fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let rows = self.normalized()?.index_select(&ids.flatten_all()?, 0)?;
        Ok(rows.reshape((b, t, ()))?)
    }

    pub fn embed_labels(&self, labels: &[usize]) -> Result<Tensor> {
        let ids: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        let ids = Tensor::from_vec(ids, (1, labels.len()), self.table.device())?;
        self.embed(&ids)
    }

    /// Probability-weighted mixture of normalised rows: `(B, T, c)` -> `(B, T, d)`.
    pub fn expected(&self, probs: &Tensor) -> Result<Tensor> {
        let table = self.normalized()?;
        let (b, t, c) = probs.dims3()?;
        Ok(probs.reshape((b * t, c))?.matmul(&table)?.reshape((b, t, ()))?)
    }
}

/// `sqrt(a_t) y0 + sqrt(1 - a_t) noise` with one `t` per batch element.
pub fn q_sample(y0: &Tensor, t: &[usize], schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    let b = y0.dim(0)?;
    if t.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch {b}", t.len())));
    }
    let signal: Vec<f64> = t.iter().map(|&t| schedule.bar_alpha(t).sqrt()).collect();
    let sigma: Vec<f64> = t.iter().map(|&t| (1.0 - schedule.bar_alpha(t)).sqrt()).collect();
    let dev = y0.device();
    let signal = Tensor::from_vec(signal, (b, 1, 1), dev)?.to_dtype(y0.dtype())?;
    let sigma = Tensor::from_vec(sigma, (b, 1, 1), dev)?.to_dtype(y0.dtype())?;
    Ok((y0.broadcast_mul(&signal)? + noise.broadcast_mul(&sigma)?)?)
}

/// Sinusoidal features: `sin(t w_i)` then `cos(t w_i)`, `w_i = 10000^(-i/half)`.
pub fn sinusoidal(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::Config(format!("timestep embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

/// `(B, dim)` sinusoidal features for a batch of timesteps.
pub fn sinusoidal_batch(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut values = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        values.extend(sinusoidal(ti as f64, dim)?);
    }
    Ok(Tensor::from_vec(values, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Standard-normal tensor drawn from a seeded stream.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// A clean-signal predictor bound to one sequence's conditions: given `y_t`
/// `(1, T, d)` and its step, returns `(y0_hat, logits)` with shapes
/// `(1, T, d)` and `(1, T, c)`.
pub trait Denoise {
    fn width(&self) -> usize;
    fn frames(&self) -> usize;
    fn dtype(&self) -> DType;
    fn denoise(&self, y_t: &Tensor, t: usize) -> Result<(Tensor, Tensor)>;
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Last-step logits `(T, c)`.
    pub logits: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub model_calls: usize,
}

/// DDIM sampling from unit Gaussian noise over `k` evenly spaced steps.
/// `eta = 0` makes the trajectory a deterministic function of the seed.
pub fn ddim_sample(
    model: &dyn Denoise,
    k: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    eta: f64,
) -> Result<SampleOutput> {
    let grid = schedule.ddim_timesteps(k)?;
    let frames = model.frames();
    let dtype = model.dtype();
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = gaussian(&[1, frames, model.width()], &mut rng, dtype, &device)?;
    let mut logits = None;
    for (i, &t) in grid.iter().enumerate() {
        let (y0, l) = model.denoise(&y, t)?;
        logits = Some(l);
        let prev = grid.get(i + 1).copied().unwrap_or(0);
        let a_t = schedule.bar_alpha(t);
        let a_prev = schedule.bar_alpha(prev);
        let eps = ((&y - (&y0 * a_t.sqrt())?)? / (1.0 - a_t).sqrt())?;
        let sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
        let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
        y = ((&y0 * a_prev.sqrt())? + (eps * dir)?)?;
        if sigma > 0.0 {
            let z = gaussian(&[1, frames, model.width()], &mut rng, dtype, &device)?;
            y = (y + (z * sigma)?)?;
        }
    }
    let logits = logits
        .expect("grid is non-empty")
        .squeeze(0)?
        .to_dtype(DType::F32)?
        .to_vec2::<f32>()?;
    let labels = logits.iter().map(|row| argmax(row)).collect();
    Ok(SampleOutput {
        logits,
        labels,
        model_calls: grid.len(),
    })
}
