//! Oracle checks of the closed-form identities, the Bernoulli statistics and
//! inference-time stripping. Each check builds its reference independently
//! of the code path under test.

use std::time::Instant;

use anyhow::Result;
use bgdb_core::bernoulli::{gaussian_approx, ks_statistic, phat_stats, simulate_trials};
use bgdb_core::block::{bgdb_loss, resize_logits, BgdbConfig, CompositeModel, DenoiserConfig, TaskLoss};
use bgdb_core::diffusion::{
    l_hybrid, l_simple, p_sample_chain, predicted_mean, q_posterior, q_sample, q_sample_at, sigma_from_v, Denoiser,
    NoiseSchedule, ScheduleKind,
};
use bgdb_core::gradcheck::{check_gradients, DEFAULT_STEP};
use bgdb_core::nets::{Backbone, BackboneConfig, MiniUNet, Module, UNetConfig};
use bgdb_core::rng::{self, StreamRng};
use bgdb_core::tensor::Activation;
use bgdb_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// Runs `body`, failing it when it errors or overruns `budget` seconds.
fn timed(id: usize, name: &'static str, budget: Option<f64>, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (mut passed, mut detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    let seconds = start.elapsed().as_secs_f64();
    if let Some(limit) = budget {
        if seconds >= limit {
            passed = false;
            detail = format!("{detail}; over the {limit}s budget");
        }
    }
    CheckResult { id, name, passed, detail, seconds }
}

fn normal(r: &mut StreamRng) -> f64 {
    r.sample(StandardNormal)
}

fn mean_var(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (mean, var, m4)
}

/// Standard error of a sample variance from the fourth central moment.
fn var_se(var: f64, m4: f64, n: usize) -> f64 {
    ((m4 - var * var).max(0.0) / n as f64).sqrt()
}

/// Iterating `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z` from a fixed
/// start agrees in mean and variance with direct draws from the closed-form
/// marginal at every step.
pub fn marginal_matches_chain() -> CheckResult {
    timed(1, "marginal vs iterated forward chain", Some(10.0), || {
        let (horizon, x0, n) = (25, 1.3, 10_000);
        let s = NoiseSchedule::new(horizon, ScheduleKind::Linear)?;
        let mut chain_rng = rng::stream(101, 0);
        let mut direct_rng = rng::stream(101, 1);
        let mut chains = vec![x0; n];
        let start = Tensor::full(&[n], x0);
        let mut worst = 0.0f64;
        for t in 1..=horizon {
            let b = s.beta(t);
            for x in chains.iter_mut() {
                *x = (1.0 - b).sqrt() * *x + b.sqrt() * normal(&mut chain_rng);
            }
            let eps = Tensor::randn(&[n], &mut direct_rng);
            let direct = q_sample(&start, t, &eps, &s)?;
            let (m1, v1, q1) = mean_var(&chains);
            let (m2, v2, q2) = mean_var(direct.data());
            let z_mean = (m1 - m2).abs() / (v1 / n as f64 + v2 / n as f64).sqrt();
            let z_var = (v1 - v2).abs() / (var_se(v1, q1, n).powi(2) + var_se(v2, q2, n).powi(2)).sqrt();
            worst = worst.max(z_mean).max(z_var);
        }
        Ok((worst < 4.0, format!("largest deviation {worst:.2} standard errors over t = 1..{horizon}")))
    })
}

/// Posterior moments from Bayes' rule on a dense grid of `x_{t-1}` match the
/// closed-form posterior.
pub fn posterior_matches_grid_bayes() -> CheckResult {
    timed(2, "posterior vs grid Bayes", Some(5.0), || {
        let s = NoiseSchedule::new(25, ScheduleKind::Linear)?;
        let mut r = rng::stream(202, 0);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let t = r.random_range(2..=25);
            let x0 = 2.0 * normal(&mut r);
            let ab = s.alpha_bar(t);
            let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * normal(&mut r);
            // prior q(x_{t-1} | x0) times likelihood q(x_t | x_{t-1})
            let (pm, pv) = (s.alpha_bar(t - 1).sqrt() * x0, 1.0 - s.alpha_bar(t - 1));
            let (a, b) = (s.alpha(t), s.beta(t));
            let log_density = |y: f64| -(y - pm).powi(2) / (2.0 * pv) - (xt - a.sqrt() * y).powi(2) / (2.0 * b);
            let (lm, ls) = (xt / a.sqrt(), (b / a).sqrt());
            let lo = (pm - 12.0 * pv.sqrt()).max(lm - 12.0 * ls);
            let hi = (pm + 12.0 * pv.sqrt()).min(lm + 12.0 * ls);
            let points = 200_001;
            let h = (hi - lo) / (points - 1) as f64;
            let grid: Vec<f64> = (0..points).map(|i| lo + i as f64 * h).collect();
            let logs: Vec<f64> = grid.iter().map(|&y| log_density(y)).collect();
            let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
            let z: f64 = w.iter().sum();
            let mean = grid.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / z;
            let var = grid.iter().zip(&w).map(|(y, w)| (y - mean).powi(2) * w).sum::<f64>() / z;

            let (mu, bt) = q_posterior(&Tensor::scalar(x0), &Tensor::scalar(xt), t, &s)?;
            worst = worst.max((mean - mu.item()).abs()).max((var - bt).abs());
        }
        Ok((worst < 1e-3, format!("largest moment error {worst:.2e} over 20 instances")))
    })
}

/// Feeding the true noise to the mean parameterisation recovers the
/// posterior mean.
pub fn eps_substitution() -> CheckResult {
    timed(3, "true-noise mean equals posterior mean", None, || {
        let s = NoiseSchedule::new(25, ScheduleKind::Linear)?;
        let mut r = rng::stream(303, 0);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x0 = Tensor::randn(&[2, 1, 4, 4], &mut r).mul_scalar(3.0);
            let eps = Tensor::randn(&[2, 1, 4, 4], &mut r);
            for t in 1..=25 {
                let xt = q_sample(&x0, t, &eps, &s)?;
                let via_eps = predicted_mean(&xt, t, &eps, &s)?;
                let (posterior, _) = q_posterior(&x0, &xt, t, &s)?;
                for (a, b) in via_eps.data().iter().zip(posterior.data()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Ok((worst < 1e-9, format!("largest difference {worst:.2e} over 100 tensors and t = 1..25")))
    })
}

/// `v = 1` gives `beta_t`, `v = 0` gives the posterior variance, and the
/// interpolation never decreases in `v`.
pub fn variance_interpolation() -> CheckResult {
    timed(4, "variance interpolation endpoints", None, || {
        let s = NoiseSchedule::new(25, ScheduleKind::Linear)?;
        let mut exact = true;
        let mut monotone = true;
        for t in 2..=25 {
            let one = sigma_from_v(&Tensor::scalar(1.0), t, &s)?.item();
            let zero = sigma_from_v(&Tensor::scalar(0.0), t, &s)?.item();
            exact &= one.to_bits() == s.beta(t).to_bits() && zero.to_bits() == s.beta_tilde(t).to_bits();
            let grid = Tensor::new((0..=100).map(|k| k as f64 / 100.0).collect(), &[101])?;
            let sig = sigma_from_v(&grid, t, &s)?;
            monotone &= sig.data().windows(2).all(|w| w[1] >= w[0]);
        }
        Ok((exact && monotone, format!("endpoints exact: {exact}, monotone on 101 points: {monotone}")))
    })
}

/// With `lambda1 = 0` the hybrid loss is bit-identical to the simple loss.
pub fn hybrid_degenerates() -> CheckResult {
    timed(5, "hybrid with lambda1 = 0 equals simple", None, || {
        let s = NoiseSchedule::new(25, ScheduleKind::Linear)?;
        let mut identical = 0;
        for i in 0..50u64 {
            let mut r = rng::stream(505, i);
            let mut net = MiniUNet::new(1, 2, 1, 8, 500 + i)?;
            net.params_mut().perturb(0.3, &mut r)?;
            let x0 = Tensor::randn(&[2, 1, 4, 4], &mut r);
            let eps = Tensor::randn(&[2, 1, 4, 4], &mut r);
            let ts = [r.random_range(1..=25), r.random_range(1..=25)];
            let hybrid = l_hybrid(&x0, &ts, &eps, &net, &s, 0.0)?.hybrid.item();
            let out = net.denoise(&q_sample_at(&x0, &ts, &eps, &s)?, &ts)?;
            let simple = l_simple(&eps, &out.eps)?.item();
            identical += usize::from(hybrid.to_bits() == simple.to_bits());
        }
        Ok((identical == 50, format!("{identical} of 50 instances bit-identical")))
    })
}

fn tiny_backbone() -> Result<Backbone> {
    Ok(Backbone::new(
        &BackboneConfig::Segmentation(UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: 1,
            depth: 1,
            channel_mult: 1,
            time_dim: None,
        }),
        61,
    )?)
}

fn tiny_block() -> BgdbConfig {
    BgdbConfig {
        horizon: 3,
        logit_side: 4,
        denoiser: DenoiserConfig { base_channels: 1, depth: 1, time_dim: 4, channel_mult: 1 },
        ..BgdbConfig::default()
    }
}

fn with_params(model: &CompositeModel, p: &[Tensor]) -> Result<CompositeModel> {
    let mut m = model.clone();
    let n = m.backbone.params().len();
    m.backbone.params_mut().set_tensors(p[..n].to_vec())?;
    m.denoiser.params_mut().set_tensors(p[n..].to_vec())?;
    Ok(m)
}

/// Every loss term and the total, differentiated with respect to all
/// parameters of a model of at most 200 scalars, against central differences.
pub fn gradient_audit() -> CheckResult {
    timed(6, "gradient audit", Some(60.0), || {
        let mut model = CompositeModel::new(tiny_backbone()?, tiny_block(), 62)?;
        model.denoiser.params_mut().perturb(0.3, &mut rng::stream(606, 1))?;
        let size = model.num_params();
        let params: Vec<Tensor> =
            model.backbone.params().tensors().iter().chain(model.denoiser.params().tensors()).cloned().collect();
        let mut r = rng::stream(606, 0);
        let x = Tensor::randn(&[2, 1, 4, 4], &mut r);
        let y = Tensor::new(x.data().iter().map(|&v| f64::from(v > 0.0)).collect(), x.shape())?;
        let cfg = model.config.clone();
        let s = cfg.schedule()?;

        type Term = Box<dyn Fn(&CompositeModel) -> bgdb_core::Result<Tensor>>;
        let hybrid_part = |pick: fn(bgdb_core::diffusion::HybridLoss) -> Tensor| -> Term {
            let (x, s, lambda1) = (x.clone(), s.clone(), cfg.lambda1);
            Box::new(move |m: &CompositeModel| {
                let x0 = resize_logits(&m.backbone_logits(&x)?, 4)?;
                let mut r = rng::stream(607, 0);
                let ts = [r.random_range(1..=3), r.random_range(1..=3)];
                let eps = Tensor::randn(x0.shape(), &mut r);
                Ok(pick(l_hybrid(&x0, &ts, &eps, &m.denoiser, &s, lambda1)?))
            })
        };
        let chain_part = |sigma: bool| -> Term {
            let (x, y, s) = (x.clone(), y.clone(), s.clone());
            Box::new(move |m: &CompositeModel| {
                let x0 = resize_logits(&m.backbone_logits(&x)?, 4)?;
                let (mu, var) = p_sample_chain(&x0, &m.denoiser, &s, &mut rng::stream(608, 0))?;
                if sigma {
                    var.mse(&Tensor::zeros(var.shape()))
                } else {
                    mu.bce_after(&y, Activation::Sigmoid)
                }
            })
        };
        let total: Term = {
            let (x, y) = (x.clone(), y.clone());
            Box::new(move |m: &CompositeModel| {
                let logits = m.backbone_logits(&x)?;
                let task = |l: &Tensor, t: &Tensor| TaskLoss::Dice.apply(l, t, Activation::Sigmoid);
                Ok(bgdb_loss(&logits, &y, &task, &m.denoiser, &m.config, &mut rng::stream(609, 0))?.total)
            })
        };
        let terms: Vec<(&str, Term)> = vec![
            ("l_simple", hybrid_part(|h| h.simple)),
            ("l_vlb", hybrid_part(|h| h.vlb)),
            ("l_hybrid", hybrid_part(|h| h.hybrid)),
            ("l_mu", chain_part(false)),
            ("l_sigma", chain_part(true)),
            ("total", total),
        ];
        let mut worst = (0.0f64, "");
        for (name, f) in &terms {
            let report = check_gradients(&params, |p| f(&with_params(&model, p).map_err(to_core)?), DEFAULT_STEP)?;
            if report.max_rel_error > worst.0 || report.max_rel_error.is_nan() {
                worst = (report.max_rel_error, name);
            }
        }
        Ok((
            size <= 200 && worst.0 < 1e-4,
            format!("{size} parameters, largest relative error {:.2e} ({})", worst.0, worst.1),
        ))
    })
}

fn to_core(e: anyhow::Error) -> bgdb_core::Error {
    bgdb_core::Error::InvalidArgument(format!("{e:#}"))
}

/// KS distance between simulated trial averages and their Gaussian limit
/// shrinks with `n` and is small at `n = 10^4`.
pub fn de_moivre_laplace() -> CheckResult {
    timed(7, "trial averages approach the Gaussian limit", None, || {
        let p = 0.3;
        let mut ks = Vec::new();
        for (i, n) in [10u64, 100, 1000, 10_000].into_iter().enumerate() {
            let samples = simulate_trials(p, n, 100_000, 700 + i as u64)?;
            let (mean, sd) = gaussian_approx(p, n)?;
            let limit = Normal::new(mean, sd)?;
            ks.push(ks_statistic(&samples, |x| limit.cdf(x))?);
        }
        let inversions = ks.windows(2).filter(|w| w[1] > w[0]).count();
        Ok((ks[3] < 0.02 && inversions <= 1, format!("KS {ks:.4?}, {inversions} inversions")))
    })
}

/// Empirical mean and variance of trial averages against `p` and
/// `p (1 - p) / n` on a 12-point grid.
pub fn trial_moments() -> CheckResult {
    timed(8, "trial average moments", None, || {
        let reps = 100_000;
        let mut worst = 0.0f64;
        let mut seed = 800;
        for p in [0.1, 0.3, 0.5, 0.9] {
            for n in [10u64, 100, 1000] {
                seed += 1;
                let samples = simulate_trials(p, n, reps, seed)?;
                let (mean, var, m4) = mean_var(&samples);
                let want = phat_stats(p, n)?;
                let z_mean = (mean - want.mean).abs() / (want.variance / reps as f64).sqrt();
                let z_var = (var - want.variance).abs() / var_se(var, m4, reps);
                worst = worst.max(z_mean).max(z_var);
            }
        }
        Ok((worst < 4.0, format!("largest deviation {worst:.2} standard errors")))
    })
}

/// The stripped, saved and reloaded backbone reproduces the composite
/// model's backbone path bit for bit with fewer parameters.
pub fn inference_parity() -> CheckResult {
    timed(9, "inference parity after stripping", None, || {
        let model = CompositeModel::new(tiny_backbone()?, BgdbConfig { logit_side: 8, ..tiny_block() }, 91)?;
        let x = Tensor::randn(&[3, 1, 8, 8], &mut rng::stream(909, 0));
        let composite = model.backbone_logits(&x)?;
        let full = model.num_params();
        let stripped = model.strip_for_inference();
        let dir = std::env::temp_dir().join(format!("bgdb-verify-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("checkpoint.bin");
        stripped.save(&path)?;
        let reloaded = Backbone::load(&path)?;
        std::fs::remove_dir_all(&dir)?;
        let out = reloaded.forward(&x)?;
        let identical = out.data().iter().zip(composite.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let smaller = reloaded.num_params() < full;
        Ok((identical && smaller, format!("bit-identical: {identical}, parameters {} < {full}", reloaded.num_params())))
    })
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        marginal_matches_chain(),
        posterior_matches_grid_bayes(),
        eps_substitution(),
        variance_interpolation(),
        hybrid_degenerates(),
        gradient_audit(),
        de_moivre_laplace(),
        trial_moments(),
        inference_parity(),
    ]
}
