//! The four training objectives and their weighted sum. Every loss takes a
//! `(B, T)` frame mask; padded frames contribute nothing.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truncation threshold of the smoothing loss (`min(delta^2, tau^2)`).
pub const SMOOTH_TAU: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sem: f64,
    pub smooth: f64,
    pub bound: f64,
    pub diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sem: 0.8,
            smooth: 0.3,
            bound: 0.5,
            diff: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.sem, self.smooth, self.bound, self.diff]
            .iter()
            .any(|w| w.is_nan() || *w < 0.0)
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over valid frames. `logits` `(B, T, c)`, `targets`
/// one-hot `(B, T, c)`, `mask` `(B, T)`.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let nll = (logp * targets)?.sum(D::Minus1)?.neg()?;
    masked_mean(&nll, mask)
}

pub fn sem_loss(sem_logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    cross_entropy(sem_logits, targets, mask)
}

pub fn diff_loss(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    cross_entropy(logits, targets, mask)
}

/// Truncated MSE of adjacent-frame log-probability differences, with the
/// earlier frame detached. Averaged over valid pairs and classes.
pub fn smooth_loss(sem_logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (_, t, c) = sem_logits.dims3()?;
    if t < 2 {
        return Err(Error::Shape("smoothing loss needs at least two frames".into()));
    }
    let logp = candle_nn::ops::log_softmax(sem_logits, D::Minus1)?;
    let cur = logp.narrow(1, 1, t - 1)?;
    let prev = logp.narrow(1, 0, t - 1)?.detach();
    let sq = (cur - prev)?.sqr()?;
    let clipped = sq.minimum(SMOOTH_TAU * SMOOTH_TAU)?;
    // A pair is valid when both of its frames are.
    let pair_mask = (mask.narrow(1, 1, t - 1)? * mask.narrow(1, 0, t - 1)?)?;
    let per_frame = (clipped.sum(D::Minus1)? / c as f64)?;
    masked_mean(&per_frame, &pair_mask)
}

/// Mean binary cross-entropy with logits; `logits` `(B, T, 1)`, `targets` `(B, T)`.
pub fn bound_loss(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let x = logits.squeeze(D::Minus1)?;
    // max(x, 0) - x y + log(1 + exp(-|x|))
    let softplus = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((x.relu()? - (&x * targets)?)? + softplus)?;
    masked_mean(&per, mask)
}

fn masked_mean(values: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let total = (values * mask)?.sum_all()?;
    let count = mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Ok(total.zeros_like()?);
    }
    Ok((total / count)?)
}

/// Scalar loss parts.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub sem: Tensor,
    pub smooth: Tensor,
    pub bound: Tensor,
    pub diff: Tensor,
}

/// Weighted sum of the four parts.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    Ok((((&parts.sem * w.sem)? + (&parts.smooth * w.smooth)?)?
        + ((&parts.bound * w.bound)? + (&parts.diff * w.diff)?)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};
    use candle_core::{DType, Device};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        ParamStore::new(seed, DType::F64)
            .root()
            .get("x", shape, Init::Normal(1.0))
            .unwrap()
    }

    fn ones(b: usize, t: usize) -> Tensor {
        Tensor::ones((b, t), DType::F64, &Device::Cpu).unwrap()
    }

    fn one_hot(labels: &[usize], c: usize) -> Tensor {
        let v: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..c).map(move |k| (k == l) as u8 as f64))
            .collect();
        Tensor::from_vec(v, (1, labels.len(), c), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn log_softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.iter().map(|v| v - z).collect()
    }

    #[test]
    fn cross_entropy_cases() {
        let labels = [0, 2, 1, 1];
        let y = one_hot(&labels, 3);
        let confident = (&y * 1e4).unwrap();
        assert!(scalar(&sem_loss(&confident, &y, &ones(1, 4)).unwrap()) < 1e-12);
        let uniform = Tensor::zeros((1, 4, 3), DType::F64, &Device::Cpu).unwrap();
        assert!((scalar(&diff_loss(&uniform, &y, &ones(1, 4)).unwrap()) - 3f64.ln()).abs() < 1e-12);
        let logits = randn(&[1, 4, 3], 1);
        let rows = logits.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let oracle = rows.iter().zip(labels).map(|(r, l)| -log_softmax(r)[l]).sum::<f64>() / 4.0;
        assert!((scalar(&sem_loss(&logits, &y, &ones(1, 4)).unwrap()) - oracle).abs() < 1e-10);
    }

    #[test]
    fn smooth_loss_cases() {
        let constant = Tensor::new(&[[[1.0, 2.0, 0.5]; 5]], &Device::Cpu).unwrap();
        assert_eq!(scalar(&smooth_loss(&constant, &ones(1, 5)).unwrap()), 0.0);

        // Two classes; frame 1 jumps so that one class's log-prob moves by more
        // than tau. log p for logits [0, 0] is -ln2 each; for [-20, 0] class 0
        // falls to about -20.
        let x = Tensor::new(&[[[0.0, 0.0], [-20.0, 0.0]]], &Device::Cpu).unwrap();
        let lp0 = log_softmax(&[0.0, 0.0]);
        let lp1 = log_softmax(&[-20.0, 0.0]);
        let d1 = lp1[1] - lp0[1];
        assert!((lp1[0] - lp0[0]).abs() > SMOOTH_TAU);
        let want = (16.0 + d1 * d1) / 2.0;
        assert!((scalar(&smooth_loss(&x, &ones(1, 2)).unwrap()) - want).abs() < 1e-12);

        let logits = randn(&[1, 6, 4], 2);
        let rows = logits.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let lp: Vec<Vec<f64>> = rows.iter().map(|r| log_softmax(r)).collect();
        let mut acc = 0.0;
        for t in 1..6 {
            for (cur, prev) in lp[t].iter().zip(&lp[t - 1]) {
                acc += (cur - prev).powi(2).min(16.0);
            }
        }
        let oracle = acc / 20.0;
        assert!((scalar(&smooth_loss(&logits, &ones(1, 6)).unwrap()) - oracle).abs() < 1e-10);
    }

    #[test]
    fn bound_loss_cases() {
        let targets = Tensor::new(&[[0.0, 1.0, 0.0]], &Device::Cpu).unwrap();
        let perfect = Tensor::new(&[[[-50.0], [50.0], [-50.0]]], &Device::Cpu).unwrap();
        assert!(scalar(&bound_loss(&perfect, &targets, &ones(1, 3)).unwrap()) < 1e-20);
        let zero = Tensor::zeros((1, 3, 1), DType::F64, &Device::Cpu).unwrap();
        let half = Tensor::new(&[[0.5, 0.5, 0.5]], &Device::Cpu).unwrap();
        assert!((scalar(&bound_loss(&zero, &half, &ones(1, 3)).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let x = randn(&[1, 5, 1], 3);
        let y = Tensor::new(&[[0.1, 0.9, 0.0, 1.0, 0.4]], &Device::Cpu).unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ys = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let oracle = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 5.0;
        assert!((scalar(&bound_loss(&x, &y, &ones(1, 5)).unwrap()) - oracle).abs() < 1e-10);
    }

    #[test]
    fn total_loss_arithmetic() {
        let one = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let parts = LossParts {
            sem: one.clone(),
            smooth: one.clone(),
            bound: one.clone(),
            diff: one.clone(),
        };
        assert!((scalar(&total_loss(&parts, &LossWeights::default()).unwrap()) - 2.6).abs() < 1e-12);
        let zero = LossWeights {
            sem: 0.0,
            smooth: 0.0,
            bound: 0.0,
            diff: 0.0,
        };
        assert_eq!(scalar(&total_loss(&parts, &zero).unwrap()), 0.0);
        let v = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        let parts = LossParts {
            sem: v(0.3),
            smooth: v(1.7),
            bound: v(0.05),
            diff: v(2.2),
        };
        let w = LossWeights {
            sem: 0.4,
            smooth: 1.1,
            bound: 2.0,
            diff: 0.7,
        };
        let want = 0.4 * 0.3 + 1.1 * 1.7 + 2.0 * 0.05 + 0.7 * 2.2;
        assert!((scalar(&total_loss(&parts, &w).unwrap()) - want).abs() < 1e-12);
    }

    #[test]
    fn padded_frames_contribute_nothing() {
        let logits = randn(&[1, 6, 3], 4);
        let y = one_hot(&[0, 1, 1, 2, 0, 0], 3);
        let mask = Tensor::new(&[[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let short = |x: &Tensor| x.narrow(1, 0, 4).unwrap();
        let a = scalar(&sem_loss(&logits, &y, &mask).unwrap());
        let b = scalar(&sem_loss(&short(&logits), &short(&y), &ones(1, 4)).unwrap());
        assert!((a - b).abs() < 1e-14);
        let a = scalar(&smooth_loss(&logits, &mask).unwrap());
        let b = scalar(&smooth_loss(&short(&logits), &ones(1, 4)).unwrap());
        assert!((a - b).abs() < 1e-14);
        let bl = randn(&[1, 6, 1], 5);
        let bt = Tensor::new(&[[0.0, 0.5, 1.0, 0.0, 1.0, 1.0]], &Device::Cpu).unwrap();
        let a = scalar(&bound_loss(&bl, &bt, &mask).unwrap());
        let b = scalar(&bound_loss(&short(&bl), &short(&bt), &ones(1, 4)).unwrap());
        assert!((a - b).abs() < 1e-14);
    }
}
