//! Statistics of repeated Bernoulli trials and their Gaussian limit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};

/// Distribution of the success fraction `p_hat` over `n` trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliSummary {
    pub p: f64,
    pub n: u64,
    pub mean: f64,
    pub variance: f64,
}

/// Logits attached to the two trial outcomes, with `y_plus > y_minus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliLogitPair {
    y_plus: f64,
    y_minus: f64,
}

impl BernoulliLogitPair {
    pub fn new(y_plus: f64, y_minus: f64) -> Result<Self> {
        if !(y_plus > y_minus) {
            return Err(Error::InvalidArgument(format!(
                "positive logit {y_plus} must exceed negative logit {y_minus}"
            )));
        }
        Ok(BernoulliLogitPair { y_plus, y_minus })
    }

    pub fn y_plus(&self) -> f64 {
        self.y_plus
    }

    pub fn y_minus(&self) -> f64 {
        self.y_minus
    }
}

impl Default for BernoulliLogitPair {
    fn default() -> Self {
        BernoulliLogitPair { y_plus: 1.0, y_minus: -1.0 }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain { op: "probability", detail: format!("p = {p} outside [0, 1]") });
    }
    Ok(())
}

fn check_trials(n: u64) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidArgument("trial count must be at least 1".into()));
    }
    Ok(())
}

/// Expected logit `y_plus * p + y_minus * (1 - p)`.
pub fn logit_expectation(pair: BernoulliLogitPair, p: f64) -> Result<f64> {
    check_probability(p)?;
    Ok(pair.y_plus * p + pair.y_minus * (1.0 - p))
}

/// Mean `p` and variance `p (1 - p) / n` of the success fraction.
pub fn phat_stats(p: f64, n: u64) -> Result<BernoulliSummary> {
    check_probability(p)?;
    check_trials(n)?;
    Ok(BernoulliSummary { p, n, mean: p, variance: p * (1.0 - p) / n as f64 })
}

/// Parameters `(mu, sigma)` of the normal limit of `p_hat`.
///
/// Degenerate probabilities have no Gaussian counterpart and are rejected.
pub fn gaussian_approx(p: f64, n: u64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain { op: "gaussian_approx", detail: format!("p = {p} outside (0, 1)") });
    }
    let summary = phat_stats(p, n)?;
    Ok((summary.mean, summary.variance.sqrt()))
}

/// `reps` success fractions of `n` independent Bernoulli(`p`) trials.
///
/// Success counts are drawn from the binomial distribution, which is the
/// law of the count of `n` independent trials.
pub fn simulate_trials(p: f64, n: u64, reps: usize, seed: u64) -> Result<Vec<f64>> {
    check_probability(p)?;
    check_trials(n)?;
    if reps < 1 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    let binomial = Binomial::new(n, p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..reps).map(|_| binomial.sample(&mut rng) as f64 / n as f64).collect())
}

/// Kolmogorov-Smirnov distance between the empirical law of `samples` and a
/// continuous `cdf`. Tied samples are handled as one jump of the empirical CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == x {
            j += 1;
        }
        let f = cdf(x);
        worst = worst.max((f - i as f64 / n).abs()).max((j as f64 / n - f).abs());
        i = j;
    }
    Ok(worst)
}
