use std::f64::consts::PI;

use super::schedule::NoiseSchedule;
use super::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-step coefficient as a tensor that broadcasts against `like`.
///
/// One timestep gives a scalar; one timestep per leading-axis item gives a
/// `[batch, 1, .., 1]` tensor.
pub(crate) fn step_coefficient(
    s: &NoiseSchedule,
    ts: &[usize],
    like: &Tensor,
    f: impl Fn(usize) -> f64,
) -> Result<Tensor> {
    for &t in ts {
        s.check(t)?;
    }
    match ts {
        [] => Err(Error::InvalidArgument("no timesteps given".into())),
        [t] => Ok(Tensor::scalar(f(*t))),
        _ => {
            if like.ndim() == 0 || like.shape()[0] != ts.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} timesteps for leading axis of shape {:?}",
                    ts.len(),
                    like.shape()
                )));
            }
            let mut shape = vec![1; like.ndim()];
            shape[0] = ts.len();
            Tensor::new(ts.iter().map(|&t| f(t)).collect(), &shape)
        }
    }
}

/// Draws `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    q_sample_at(x0, &[t], eps, s)
}

/// [`q_sample`] with one timestep per leading-axis item (or one shared).
pub fn q_sample_at(x0: &Tensor, ts: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    x0.expect_same_shape(eps)?;
    let signal = step_coefficient(s, ts, x0, |t| s.alpha_bar(t).sqrt())?;
    let noise = step_coefficient(s, ts, x0, |t| (1.0 - s.alpha_bar(t)).sqrt())?;
    x0.mul(&signal)?.add(&eps.mul(&noise)?)
}

/// Mean and variance of `q(x_{t-1} | x_t, x0)`.
pub fn q_posterior(x0: &Tensor, xt: &Tensor, t: usize, s: &NoiseSchedule) -> Result<(Tensor, f64)> {
    let (mean, _) = q_posterior_at(x0, xt, &[t], s)?;
    Ok((mean, s.beta_tilde(t)))
}

/// [`q_posterior`] with per-item timesteps; the variance comes back as a
/// broadcastable coefficient tensor.
pub fn q_posterior_at(x0: &Tensor, xt: &Tensor, ts: &[usize], s: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    x0.expect_same_shape(xt)?;
    let c0 = step_coefficient(s, ts, x0, |t| {
        s.alpha_bar(t - 1).sqrt() * s.beta(t) / (1.0 - s.alpha_bar(t))
    })?;
    let ct = step_coefficient(s, ts, x0, |t| {
        s.alpha(t).sqrt() * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t))
    })?;
    let mean = x0.mul(&c0)?.add(&xt.mul(&ct)?)?;
    let var = step_coefficient(s, ts, x0, |t| s.beta_tilde(t))?;
    Ok((mean, var))
}

/// Reverse-step mean from a noise prediction:
/// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)`.
pub fn predicted_mean(xt: &Tensor, t: usize, eps_pred: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    predicted_mean_at(xt, &[t], eps_pred, s)
}

pub fn predicted_mean_at(xt: &Tensor, ts: &[usize], eps_pred: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    xt.expect_same_shape(eps_pred)?;
    let eps_coef = step_coefficient(s, ts, xt, |t| s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt())?;
    let scale = step_coefficient(s, ts, xt, |t| 1.0 / s.alpha(t).sqrt())?;
    xt.sub(&eps_pred.mul(&eps_coef)?)?.mul(&scale)
}

/// Learned reverse variance `exp(v log beta_t + (1 - v) log beta_tilde_t)`,
/// evaluated as `beta_t^v * beta_tilde_t^(1 - v)` so both endpoints are exact.
/// `beta_tilde` is lifted to `CLAMP_MIN` (it is zero at `t = 1`).
pub fn sigma_from_v(v: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    sigma_from_v_at(v, &[t], s)
}

pub fn sigma_from_v_at(v: &Tensor, ts: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    if let Some(bad) = v.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain { op: "sigma_from_v", detail: format!("v = {bad} outside [0, 1]") });
    }
    let hi = step_coefficient(s, ts, v, |t| s.beta(t))?;
    let lo = step_coefficient(s, ts, v, |t| s.beta_tilde_clamped(t))?;
    let n = v.numel();
    let per_item = n / hi.numel();
    let bounds = move |i: usize| (hi.data()[i / per_item], lo.data()[i / per_item]);
    let data: Vec<f64> = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let (b, bt) = bounds(i);
            b.powf(w) * bt.powf(1.0 - w)
        })
        .collect();
    let out = data.clone();
    let log_ratio: Vec<f64> = (0..n)
        .map(|i| {
            let (b, bt) = bounds(i);
            b.ln() - bt.ln()
        })
        .collect();
    let grad_fn = Box::new(move |g: &[f64]| {
        vec![Some(g.iter().zip(&out).zip(&log_ratio).map(|((gi, y), r)| gi * y * r).collect())]
    });
    Ok(Tensor::from_op(data, v.shape().to_vec(), vec![v.clone()], grad_fn))
}

/// Mean squared error between the true and predicted noise.
pub fn l_simple(eps: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    eps_pred.mse(eps)
}

fn require_positive(var: &Tensor, name: &str) -> Result<()> {
    match var.data().iter().find(|v| !(**v > 0.0)) {
        Some(bad) => Err(Error::Domain { op: "kl_gaussian", detail: format!("{name} = {bad}") }),
        None => Ok(()),
    }
}

/// Elementwise `KL(N(mu1, var1) || N(mu2, var2))`.
pub fn kl_gaussian_elementwise(mu1: &Tensor, var1: &Tensor, mu2: &Tensor, var2: &Tensor) -> Result<Tensor> {
    require_positive(var1, "var1")?;
    require_positive(var2, "var2")?;
    let log_ratio = var2.div(var1)?.log()?;
    let spread = var1.add(&mu1.sub(mu2)?.square())?.div(var2)?;
    Ok(log_ratio.add(&spread)?.add_scalar(-1.0).mul_scalar(0.5))
}

/// `KL(N(mu1, var1) || N(mu2, var2))` averaged over elements.
pub fn kl_gaussian(mu1: &Tensor, var1: &Tensor, mu2: &Tensor, var2: &Tensor) -> Result<Tensor> {
    Ok(kl_gaussian_elementwise(mu1, var1, mu2, var2)?.mean())
}

/// Continuous negative log-likelihood of `x` under `N(mean, var)`, averaged.
pub fn gaussian_nll(x: &Tensor, mean: &Tensor, var: &Tensor) -> Result<Tensor> {
    require_positive(var, "var")?;
    let quad = x.sub(mean)?.square().div(var)?;
    Ok(var.log()?.add(&quad)?.add_scalar((2.0 * PI).ln()).mul_scalar(0.5).mean())
}

/// Variational bound term for one timestep: `KL(q(x_{t-1}|x_t,x0) || p)` for
/// `t >= 2`, the Gaussian negative log-likelihood of `x0` for `t = 1`.
///
/// The posterior mean, the model mean and their inputs pass through
/// `stop_gradient`; only the variance head `v` receives gradient.
pub fn l_vlb(x0: &Tensor, xt: &Tensor, t: usize, out: &DenoiserOutput, s: &NoiseSchedule) -> Result<Tensor> {
    vlb_term(&x0.stop_gradient(), &xt.stop_gradient(), t, &out.eps.stop_gradient(), &out.v, s)
}

/// [`l_vlb`] with one timestep per leading-axis item, averaged over items.
pub fn l_vlb_at(x0: &Tensor, xt: &Tensor, ts: &[usize], out: &DenoiserOutput, s: &NoiseSchedule) -> Result<Tensor> {
    if let [t] = ts {
        return l_vlb(x0, xt, *t, out, s);
    }
    let (x0, xt, eps) = (x0.stop_gradient(), xt.stop_gradient(), out.eps.stop_gradient());
    let mut total: Option<Tensor> = None;
    for (i, &t) in ts.iter().enumerate() {
        let item = |x: &Tensor| x.narrow(0, i, 1);
        let term = vlb_term(&item(&x0)?, &item(&xt)?, t, &item(&eps)?, &item(&out.v)?, s)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no timesteps given".into()))?;
    Ok(total.mul_scalar(1.0 / ts.len() as f64))
}

fn vlb_term(x0: &Tensor, xt: &Tensor, t: usize, eps: &Tensor, v: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    let model_mean = predicted_mean(xt, t, eps, s)?;
    let model_var = sigma_from_v(v, t, s)?;
    if t == 1 {
        gaussian_nll(x0, &model_mean, &model_var)
    } else {
        let (post_mean, post_var) = q_posterior(x0, xt, t, s)?;
        kl_gaussian(&post_mean, &Tensor::scalar(post_var), &model_mean, &model_var)
    }
}

/// Prior term `KL(q(x_T | x0) || N(0, 1))`. Parameter-free, diagnostic only.
pub fn l_vlb_prior(x0: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    let horizon = s.horizon();
    let mean = x0.mul_scalar(s.alpha_bar(horizon).sqrt());
    let var = Tensor::scalar(1.0 - s.alpha_bar(horizon));
    kl_gaussian(&mean, &var, &Tensor::zeros(x0.shape()), &Tensor::scalar(1.0))
}

/// Components of `L_simple + lambda1 * L_vlb`.
#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub simple: Tensor,
    pub vlb: Tensor,
    pub hybrid: Tensor,
}

/// Noises `x0` to `x_t` with `eps`, runs the denoiser once and returns the
/// hybrid objective with its components.
pub fn l_hybrid(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    denoiser: &dyn Denoiser,
    s: &NoiseSchedule,
    lambda1: f64,
) -> Result<HybridLoss> {
    let xt = q_sample_at(x0, ts, eps, s)?;
    let out = denoiser.denoise(&xt, ts)?;
    let simple = l_simple(eps, &out.eps)?;
    let vlb = l_vlb_at(x0, &xt, ts, &out, s)?;
    let hybrid = simple.add(&vlb.mul_scalar(lambda1))?;
    Ok(HybridLoss { simple, vlb, hybrid })
}
