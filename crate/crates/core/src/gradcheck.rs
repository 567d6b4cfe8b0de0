//! Central finite-difference checks of analytic gradients, meant for f64
//! parameter stores and toy shapes.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares gradients of `loss` (a scalar) for a random subset of at most
/// `per_var` entries of every variable.
pub fn check_gradients(
    vars: &[(String, Var)],
    loss: &dyn Fn() -> Result<Tensor>,
    per_var: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheck> {
    const FLOOR: f64 = 1e-6;
    let value = |t: Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    let mut checked = 0;
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let n = original.len();
        let picks: Vec<usize> = if n <= per_var {
            (0..n).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let mut perturbed = original.clone();
            perturbed[i] = original[i] + step;
            var.set(&Tensor::from_vec(perturbed.clone(), var.shape(), var.device())?)?;
            let plus = value(loss()?)?;
            perturbed[i] = original[i] - step;
            var.set(&Tensor::from_vec(perturbed, var.shape(), var.device())?)?;
            let minus = value(loss()?)?;
            var.set(&Tensor::from_vec(original.clone(), var.shape(), var.device())?)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if !rel.is_finite() {
                return Err(Error::Data(format!("non-finite gradient for {name}[{i}]")));
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
