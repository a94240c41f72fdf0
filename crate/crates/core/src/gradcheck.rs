//! Central finite-difference checks of reverse-mode gradients.
//!
//! Values routed through [`Tensor::stop_gradient`] are recorded during the
//! analytic pass and replayed while differencing, so the numeric derivative
//! differentiates the same surrogate the backward pass does.

use crate::error::Result;
use crate::tensor::{no_grad, record_frozen, replay_frozen, Tensor};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Absolute floor (scaled by `max(1, |loss|)`) below which gradient entries
/// are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub loss: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `d f / d inputs` from `backward` with central differences of
/// step `h` over every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::parameter(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let (loss, frozen) = record_frozen(|| f(&leaves));
    let loss = loss?;
    loss.backward()?;
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let base: Vec<Vec<f64>> = inputs.iter().map(Tensor::to_vec).collect();
    let eval = |which: usize, index: usize, delta: f64| -> Result<f64> {
        let tensors: Vec<Tensor> = base
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(i, (values, t))| {
                let mut values = values.clone();
                if i == which {
                    values[index] += delta;
                }
                Tensor::new(values, t.shape())
            })
            .collect::<Result<_>>()?;
        let out = no_grad(|| replay_frozen(&frozen, || f(&tensors)))?;
        Ok(out.item())
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    for (which, t) in inputs.iter().enumerate() {
        for index in 0..t.numel() {
            let plus = eval(which, index, h)?;
            let minus = eval(which, index, -h)?;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }

    let floor = GRAD_FLOOR * loss.item().abs().max(1.0);
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 || e.is_nan() { (i, e) } else { best });
    Ok(GradReport { loss: loss.item(), analytic, numeric, max_rel_error, worst_index })
}
