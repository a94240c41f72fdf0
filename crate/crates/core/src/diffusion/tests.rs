use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::gradcheck::{check_gradients, DEFAULT_STEP};
use crate::Error;

fn linear(horizon: usize) -> NoiseSchedule {
    NoiseSchedule::new(horizon, ScheduleKind::Linear).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// `eps = w x + b`, `v = sigmoid(c x)` with scalar parameters.
struct Affine {
    w: Tensor,
    b: Tensor,
    c: Tensor,
    calls: Cell<usize>,
}

impl Affine {
    fn new(w: f64, b: f64, c: f64) -> Self {
        Affine {
            w: Tensor::scalar(w),
            b: Tensor::scalar(b),
            c: Tensor::scalar(c),
            calls: Cell::new(0),
        }
    }

    fn from(params: &[Tensor]) -> Self {
        Affine {
            w: params[0].clone(),
            b: params[1].clone(),
            c: params[2].clone(),
            calls: Cell::new(0),
        }
    }
}

impl Denoiser for Affine {
    fn denoise(&self, xt: &Tensor, _ts: &[usize]) -> Result<DenoiserOutput> {
        self.calls.set(self.calls.get() + 1);
        Ok(DenoiserOutput {
            eps: xt.mul(&self.w)?.add(&self.b)?,
            v: xt.mul(&self.c)?.sigmoid(),
        })
    }
}

/// Always predicts `eps = 0` and `v = 1`.
struct Blank;

impl Denoiser for Blank {
    fn denoise(&self, xt: &Tensor, _ts: &[usize]) -> Result<DenoiserOutput> {
        Ok(DenoiserOutput { eps: Tensor::zeros(xt.shape()), v: Tensor::ones(xt.shape()) })
    }
}

#[test]
fn q_sample_without_noise_scales_signal() {
    let s = linear(25);
    let x0 = Tensor::from_slice(&[1.0, -2.0, 0.5]);
    let out = q_sample(&x0, 7, &Tensor::zeros(&[3]), &s).unwrap();
    for (o, x) in out.data().iter().zip(x0.data()) {
        assert_eq!(*o, s.alpha_bar(7).sqrt() * x);
    }
}

#[test]
fn q_sample_approaches_noise_at_large_t() {
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let x0 = Tensor::from_slice(&[3.0, -3.0]);
    let eps = Tensor::from_slice(&[0.4, -1.1]);
    let out = q_sample(&x0, 1000, &eps, &s).unwrap();
    for (o, e) in out.data().iter().zip(eps.data()) {
        assert!((o - e).abs() < 0.03);
    }
}

#[test]
fn q_sample_moments_match_marginal() {
    let s = linear(25);
    let (x0, t, n) = (0.7, 10, 100_000);
    let eps = Tensor::randn(&[n], &mut rng(1));
    let xs = q_sample(&Tensor::full(&[n], x0), t, &eps, &s).unwrap();
    let mean = xs.data().iter().sum::<f64>() / n as f64;
    let var = xs.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (want_mean, want_var) = (s.alpha_bar(t).sqrt() * x0, 1.0 - s.alpha_bar(t));
    assert!((mean - want_mean).abs() < 4.0 * (want_var / n as f64).sqrt());
    assert!((var - want_var).abs() < 4.0 * want_var * (2.0 / (n - 1) as f64).sqrt());
}

#[test]
fn q_sample_rejects_bad_input() {
    let s = linear(25);
    let x = Tensor::zeros(&[2]);
    assert!(matches!(q_sample(&x, 0, &x, &s), Err(Error::TimestepOutOfRange { .. })));
    assert!(matches!(q_sample(&x, 26, &x, &s), Err(Error::TimestepOutOfRange { .. })));
    assert!(q_sample(&x, 3, &Tensor::zeros(&[3]), &s).is_err());
}

#[test]
fn posterior_at_first_step_is_degenerate() {
    let s = linear(25);
    let x0 = Tensor::from_slice(&[0.3, -1.2]);
    let xt = Tensor::from_slice(&[2.0, 5.0]);
    let (mean, var) = q_posterior(&x0, &xt, 1, &s).unwrap();
    assert_eq!(var, 0.0);
    for (m, x) in mean.data().iter().zip(x0.data()) {
        assert!((m - x).abs() < 1e-12);
    }
}

#[test]
fn posterior_matches_grid_bayes() {
    let s = linear(25);
    let mut r = rng(2);
    for _ in 0..20 {
        let t = r.random_range(2..=25);
        let x0: f64 = r.random_range(-2.0..2.0);
        let xt: f64 = r.random_range(-3.0..3.0);
        // Prior q(x_{t-1} | x0) times likelihood q(x_t | x_{t-1}), normalised on a grid.
        let prior_mean = s.alpha_bar(t - 1).sqrt() * x0;
        let prior_var = 1.0 - s.alpha_bar(t - 1);
        let beta = 1.0 - s.alpha(t);
        let width = 12.0 * prior_var.sqrt().min(beta.sqrt());
        let centre = (prior_mean / prior_var + s.alpha(t).sqrt() * xt / beta)
            / (1.0 / prior_var + s.alpha(t) / beta);
        let steps = 40_001;
        let dx = 2.0 * width / (steps - 1) as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..steps {
            let x = centre - width + i as f64 * dx;
            let w = normal_pdf(x, prior_mean, prior_var) * normal_pdf(xt, s.alpha(t).sqrt() * x, beta);
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let grid_mean = m1 / z;
        let grid_var = m2 / z - grid_mean * grid_mean;
        let (mean, var) =
            q_posterior(&Tensor::scalar(x0), &Tensor::scalar(xt), t, &s).unwrap();
        assert!((mean.item() - grid_mean).abs() < 1e-3, "t={t}");
        assert!((var - grid_var).abs() < 1e-3, "t={t}");
    }
}

#[test]
fn posterior_mean_matches_direct_formula() {
    let s = linear(25);
    let c = 0.9;
    for t in 2..=25 {
        let ab = s.alpha_bars();
        let beta = s.betas()[t - 1];
        let want = (ab[t - 1].sqrt() * beta / (1.0 - ab[t])) * c
            + ((1.0 - beta).sqrt() * (1.0 - ab[t - 1]) / (1.0 - ab[t])) * c;
        let (mean, _) = q_posterior(&Tensor::scalar(c), &Tensor::scalar(c), t, &s).unwrap();
        assert!((mean.item() - want).abs() < 1e-14);
        assert!((mean.item() - c).abs() > 1e-6);
    }
}

#[test]
fn true_noise_reproduces_posterior_mean() {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = NoiseSchedule::new(25, kind).unwrap();
        let mut r = rng(3);
        for t in 1..=25 {
            let x0 = Tensor::randn(&[4, 3], &mut r);
            let eps = Tensor::randn(&[4, 3], &mut r);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let model = predicted_mean(&xt, t, &eps, &s).unwrap();
            let (post, _) = q_posterior(&x0, &xt, t, &s).unwrap();
            for (a, b) in model.data().iter().zip(post.data()) {
                assert!((a - b).abs() < 1e-9, "{kind:?} t={t}");
            }
        }
    }
}

#[test]
fn zero_noise_prediction_rescales() {
    let s = linear(25);
    let xt = Tensor::from_slice(&[1.5, -0.5]);
    let out = predicted_mean(&xt, 4, &Tensor::zeros(&[2]), &s).unwrap();
    for (o, x) in out.data().iter().zip(xt.data()) {
        assert_eq!(*o, x * (1.0 / s.alpha(4).sqrt()));
    }
}

#[test]
fn variance_endpoints_are_exact() {
    let s = linear(25);
    for t in 2..=25 {
        let hi = sigma_from_v(&Tensor::ones(&[3]), t, &s).unwrap();
        let lo = sigma_from_v(&Tensor::zeros(&[3]), t, &s).unwrap();
        assert!(hi.data().iter().all(|&x| x == s.beta(t)));
        assert!(lo.data().iter().all(|&x| x == s.beta_tilde(t)));
    }
    let first = sigma_from_v(&Tensor::zeros(&[1]), 1, &s).unwrap();
    assert_eq!(first.item(), crate::tensor::CLAMP_MIN);
}

#[test]
fn half_weight_gives_geometric_mean() {
    let s = linear(25);
    let out = sigma_from_v(&Tensor::scalar(0.5), 10, &s).unwrap();
    let want = (s.beta(10) * s.beta_tilde(10)).sqrt();
    assert!((out.item() - want).abs() <= 1e-14 * want);
}

#[test]
fn variance_is_monotone_in_v() {
    let s = linear(25);
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    for t in 1..=25 {
        let out = sigma_from_v(&Tensor::from_slice(&grid), t, &s).unwrap();
        assert!(out.data().windows(2).all(|w| w[0] <= w[1]), "t={t}");
    }
}

#[test]
fn variance_weight_outside_unit_interval_is_rejected() {
    let s = linear(25);
    assert!(matches!(
        sigma_from_v(&Tensor::scalar(1.5), 3, &s),
        Err(Error::Domain { .. })
    ));
}

#[test]
fn variance_gradient_matches_finite_differences() {
    let s = linear(25);
    let v = Tensor::from_slice(&[0.1, 0.5, 0.8]);
    let report = check_gradients(
        &[v],
        |p| Ok(sigma_from_v(&p[0], 6, &s)?.log()?.sum()),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn l_simple_cases() {
    let a = Tensor::from_slice(&[1.0, 2.0]);
    assert_eq!(l_simple(&a, &a).unwrap().item(), 0.0);
    assert_eq!(l_simple(&Tensor::zeros(&[4]), &Tensor::ones(&[4])).unwrap().item(), 1.0);
    let mut r = rng(4);
    let e = Tensor::randn(&[7], &mut r);
    let p = Tensor::randn(&[7], &mut r);
    let mut acc = 0.0;
    for i in 0..7 {
        let d = p.data()[i] - e.data()[i];
        acc += d * d;
    }
    assert!((l_simple(&e, &p).unwrap().item() - acc / 7.0).abs() < 1e-14);
}

#[test]
fn kl_closed_cases() {
    let one = Tensor::scalar(1.0);
    let zero = Tensor::scalar(0.0);
    assert_eq!(kl_gaussian(&zero, &one, &zero, &one).unwrap().item(), 0.0);
    assert_eq!(kl_gaussian(&zero, &one, &one, &one).unwrap().item(), 0.5);
    assert!(matches!(
        kl_gaussian(&zero, &zero, &zero, &one),
        Err(Error::Domain { .. })
    ));
    assert!(kl_gaussian(&zero, &one, &zero, &Tensor::scalar(-1.0)).is_err());
}

#[test]
fn kl_matches_quadrature() {
    let mut r = rng(5);
    for _ in 0..10 {
        let (m1, m2): (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let (v1, v2): (f64, f64) = (r.random_range(0.2..2.0), r.random_range(0.2..2.0));
        let (lo, hi, steps) = (m1 - 14.0 * v1.sqrt(), m1 + 14.0 * v1.sqrt(), 200_001);
        let dx = (hi - lo) / (steps - 1) as f64;
        let mut integral = 0.0;
        for i in 0..steps {
            let x = lo + i as f64 * dx;
            let p = normal_pdf(x, m1, v1);
            if p > 0.0 {
                let w = if i == 0 || i == steps - 1 { 0.5 } else { 1.0 };
                integral += w * p * (p / normal_pdf(x, m2, v2)).ln() * dx;
            }
        }
        let kl = kl_gaussian(
            &Tensor::scalar(m1),
            &Tensor::scalar(v1),
            &Tensor::scalar(m2),
            &Tensor::scalar(v2),
        )
        .unwrap();
        assert!((kl.item() - integral).abs() < 1e-4);
    }
}

#[test]
fn perfect_denoiser_has_zero_bound_term() {
    let s = linear(25);
    let mut r = rng(6);
    for t in 2..=25 {
        let x0 = Tensor::randn(&[5], &mut r);
        let eps = Tensor::randn(&[5], &mut r);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let out = DenoiserOutput { eps, v: Tensor::zeros(&[5]) };
        let l = l_vlb(&x0, &xt, t, &out, &s).unwrap().item();
        assert!(l.abs() < 1e-10, "t={t} l={l}");
    }
}

#[test]
fn bound_term_matches_composed_oracle() {
    let s = linear(25);
    let mut r = rng(7);
    let t = 5;
    let x0: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
    let eps: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
    let eps_pred: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();

    let ab = |k: usize| s.alpha_bars()[k];
    let beta = s.betas()[t - 1];
    let alpha = 1.0 - beta;
    let beta_tilde = (1.0 - ab(t - 1)) / (1.0 - ab(t)) * beta;
    let mut want = 0.0;
    for i in 0..6 {
        let xt = ab(t).sqrt() * x0[i] + (1.0 - ab(t)).sqrt() * eps[i];
        let post = ab(t - 1).sqrt() * beta / (1.0 - ab(t)) * x0[i]
            + alpha.sqrt() * (1.0 - ab(t - 1)) / (1.0 - ab(t)) * xt;
        let model = (xt - beta / (1.0 - ab(t)).sqrt() * eps_pred[i]) / alpha.sqrt();
        let var = (v[i] * beta.ln() + (1.0 - v[i]) * beta_tilde.ln()).exp();
        want += 0.5 * ((var / beta_tilde).ln() + (beta_tilde + (post - model).powi(2)) / var - 1.0);
    }
    want /= 6.0;

    let x0_t = Tensor::from_slice(&x0);
    let xt = q_sample(&x0_t, t, &Tensor::from_slice(&eps), &s).unwrap();
    let out = DenoiserOutput { eps: Tensor::from_slice(&eps_pred), v: Tensor::from_slice(&v) };
    let got = l_vlb(&x0_t, &xt, t, &out, &s).unwrap().item();
    assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn bound_term_is_nonnegative() {
    let s = linear(25);
    let mut r = rng(8);
    for _ in 0..200 {
        let t = r.random_range(2..=25);
        let x0 = Tensor::randn(&[3], &mut r);
        let xt = Tensor::randn(&[3], &mut r);
        let v: Vec<f64> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
        let out = DenoiserOutput { eps: Tensor::randn(&[3], &mut r), v: Tensor::from_slice(&v) };
        assert!(l_vlb(&x0, &xt, t, &out, &s).unwrap().item() >= 0.0);
    }
}

#[test]
fn first_step_uses_gaussian_likelihood() {
    let s = linear(25);
    let x0 = Tensor::from_slice(&[0.2, -0.4]);
    let xt = Tensor::from_slice(&[0.25, -0.3]);
    let out = DenoiserOutput { eps: Tensor::from_slice(&[0.1, 0.0]), v: Tensor::from_slice(&[1.0, 1.0]) };
    let mean = predicted_mean(&xt, 1, &out.eps, &s).unwrap();
    let var = s.beta(1);
    let want: f64 = (0..2)
        .map(|i| -normal_pdf(x0.data()[i], mean.data()[i], var).ln())
        .sum::<f64>()
        / 2.0;
    let got = l_vlb(&x0, &xt, 1, &out, &s).unwrap().item();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn prior_term_vanishes_with_signal() {
    let x0 = Tensor::from_slice(&[1.0, -1.0]);
    let short = l_vlb_prior(&x0, &linear(5)).unwrap().item();
    let long = l_vlb_prior(&x0, &NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap()).unwrap().item();
    assert!(long < 1e-4 && long < short.max(1e-4));
}

#[test]
fn bound_gradient_skips_mean_pathway() {
    let s = linear(25);
    let x0 = Tensor::parameter(vec![0.5, -0.5], &[2]).unwrap();
    let eps = Tensor::parameter(vec![0.3, 0.1], &[2]).unwrap();
    let v = Tensor::parameter(vec![0.4, 0.6], &[2]).unwrap();
    let xt = q_sample(&x0, 8, &Tensor::from_slice(&[1.0, -1.0]), &s).unwrap();
    let out = DenoiserOutput { eps: eps.clone(), v: v.clone() };
    l_vlb(&x0, &xt, 8, &out, &s).unwrap().backward().unwrap();
    assert!(x0.grad().is_none() && eps.grad().is_none());
    assert!(v.grad().unwrap().iter().any(|g| *g != 0.0));
}

#[test]
fn per_item_steps_match_single_steps() {
    let s = linear(25);
    let mut r = rng(9);
    let ts = [1, 7, 25];
    let x0 = Tensor::randn(&[3, 2, 2], &mut r);
    let eps = Tensor::randn(&[3, 2, 2], &mut r);
    let batched = q_sample_at(&x0, &ts, &eps, &s).unwrap();
    let v = Tensor::new((0..12).map(|i| i as f64 / 12.0).collect(), &[3, 2, 2]).unwrap();
    let out = DenoiserOutput { eps: Tensor::randn(&[3, 2, 2], &mut r), v };
    let mut vlb = 0.0;
    for (i, &t) in ts.iter().enumerate() {
        let item = |x: &Tensor| x.narrow(0, i, 1).unwrap();
        let single = q_sample(&item(&x0), t, &item(&eps), &s).unwrap();
        assert_eq!(single.data(), item(&batched).data());
        let single_out = DenoiserOutput { eps: item(&out.eps), v: item(&out.v) };
        vlb += l_vlb(&item(&x0), &single, t, &single_out, &s).unwrap().item();
    }
    let got = l_vlb_at(&x0, &batched, &ts, &out, &s).unwrap().item();
    assert!((got - vlb / 3.0).abs() <= 1e-12 * got.abs());
    assert!(q_sample_at(&x0, &[1, 2], &eps, &s).is_err());
}

#[test]
fn hybrid_without_bound_weight_is_simple_loss() {
    let s = linear(25);
    let net = Affine::new(0.3, -0.1, 0.7);
    let mut r = rng(10);
    for _ in 0..50 {
        let x0 = Tensor::randn(&[2, 3], &mut r);
        let eps = Tensor::randn(&[2, 3], &mut r);
        let ts = [r.random_range(1..=25), r.random_range(1..=25)];
        let h = l_hybrid(&x0, &ts, &eps, &net, &s, 0.0).unwrap();
        assert_eq!(h.hybrid.item().to_bits(), h.simple.item().to_bits());

        let h = l_hybrid(&x0, &ts, &eps, &net, &s, 1e-3).unwrap();
        assert_eq!(h.hybrid.item(), h.simple.item() + 1e-3 * h.vlb.item());
    }
}

#[test]
fn hybrid_gradient_matches_finite_differences() {
    let s = linear(10);
    let mut r = rng(11);
    let x0 = Tensor::randn(&[2, 3], &mut r);
    let eps = Tensor::randn(&[2, 3], &mut r);
    let params = [Tensor::scalar(0.3), Tensor::scalar(-0.2), Tensor::scalar(0.5)];
    for ts in [vec![4], vec![1, 9]] {
        let report = check_gradients(
            &params,
            |p| Ok(l_hybrid(&x0, &ts, &eps, &Affine::from(p), &s, 0.5)?.hybrid),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

#[test]
fn single_step_chain_returns_first_step_moments() {
    let s = linear(1);
    let net = Affine::new(0.2, 0.1, 0.3);
    let x = Tensor::from_slice(&[0.5, -1.0]);
    let (mu, sigma) = p_sample_chain(&x, &net, &s, &mut rng(12)).unwrap();
    assert_eq!(net.calls.get(), 1);
    let out = net.denoise(&x, &[1]).unwrap();
    assert_eq!(mu.data(), predicted_mean(&x, 1, &out.eps, &s).unwrap().data());
    assert_eq!(sigma.data(), sigma_from_v(&out.v, 1, &s).unwrap().data());
}

#[test]
fn chain_is_deterministic_per_seed() {
    let s = linear(25);
    let net = Affine::new(0.2, 0.1, 0.3);
    let x = Tensor::from_slice(&[0.5, -1.0, 2.0]);
    let a = p_sample_chain(&x, &net, &s, &mut rng(13)).unwrap();
    let b = p_sample_chain(&x, &net, &s, &mut rng(13)).unwrap();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn blank_denoiser_chain_matches_standalone_loop() {
    let s = linear(25);
    let start = [0.8, -0.3];
    let (mu, sigma) = p_sample_chain(&Tensor::from_slice(&start), &Blank, &s, &mut rng(14)).unwrap();

    let mut r = rng(14);
    let mut x = start.to_vec();
    for t in (2..=25).rev() {
        let alpha = 1.0 - s.betas()[t - 1];
        for xi in x.iter_mut() {
            let z: f64 = r.sample(StandardNormal);
            *xi = *xi / alpha.sqrt() + s.betas()[t - 1].sqrt() * z;
        }
    }
    let alpha1 = 1.0 - s.betas()[0];
    for i in 0..2 {
        assert!((mu.data()[i] - x[i] / alpha1.sqrt()).abs() < 1e-12);
        assert_eq!(sigma.data()[i], s.betas()[0]);
    }
}

#[test]
fn iterated_forward_steps_match_marginal() {
    let s = linear(25);
    let (x0, n) = (1.3, 10_000);
    let mut r = rng(15);
    let mut chains = vec![x0; n];
    for t in 1..=25 {
        let beta = s.beta(t);
        for x in chains.iter_mut() {
            let z: f64 = r.sample(StandardNormal);
            *x = (1.0 - beta).sqrt() * *x + beta.sqrt() * z;
        }
        let eps = Tensor::randn(&[n], &mut r);
        let direct = q_sample(&Tensor::full(&[n], x0), t, &eps, &s).unwrap();
        let (m_a, v_a) = moments(&chains);
        let (m_b, v_b) = moments(direct.data());
        let var = 1.0 - s.alpha_bar(t);
        assert!((m_a - m_b).abs() < 4.0 * (2.0 * var / n as f64).sqrt(), "t={t}");
        assert!((v_a - v_b).abs() < 4.0 * var * (4.0 / (n - 1) as f64).sqrt(), "t={t}");
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}
