//! Gaussian diffusion: forward noising, the true posterior, the learned
//! reverse step and its training losses.

mod losses;
mod schedule;

#[cfg(test)]
mod tests;

use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

pub use losses::*;
pub use schedule::{NoiseSchedule, ScheduleKind, MAX_BETA};

/// Noise prediction and variance interpolation weights, both shaped like `x_t`.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: Tensor,
    pub v: Tensor,
}

/// A network predicting `(eps, v)` from a noised sample.
///
/// `ts` holds either a single timestep shared by the whole batch or one
/// timestep per leading-axis item.
pub trait Denoiser {
    fn denoise(&self, xt: &Tensor, ts: &[usize]) -> Result<DenoiserOutput>;
}

/// Runs the learned reverse process from `x_start` taken as `x_T`.
///
/// Steps `T..=2` draw `x_{t-1} = mu + sqrt(sigma) z`; the last step returns
/// `(mu, sigma)` at `t = 1` without sampling. The whole chain stays on the
/// autodiff graph.
pub fn p_sample_chain<R: Rng + ?Sized>(
    x_start: &Tensor,
    denoiser: &dyn Denoiser,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if !x_start.all_finite() {
        return Err(crate::Error::NonFinite("chain start".into()));
    }
    let mut x = x_start.clone();
    for t in (1..=s.horizon()).rev() {
        let out = denoiser.denoise(&x, &[t])?;
        let mean = predicted_mean(&x, t, &out.eps, s)?;
        let var = sigma_from_v(&out.v, t, s)?;
        if t == 1 {
            return Ok((mean, var));
        }
        let z = Tensor::randn(x.shape(), rng);
        x = mean.add(&var.sqrt()?.mul(&z)?)?;
    }
    unreachable!("schedule horizon is at least 1")
}
