use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::CLAMP_MIN;

/// Largest forward-noise variance a schedule may produce.
pub const MAX_BETA: f64 = 0.999;

const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear betas rescaled from the 1000-step reference range.
    #[default]
    Linear,
    /// Squared-cosine cumulative signal profile.
    Cosine,
}

/// Forward-process variances for a horizon `T`, indexed from 1.
///
/// `alpha_bar(0) == 1` and `alpha_bar(t)` is the running product of
/// `alpha(1) .. alpha(t)`, which makes `beta_tilde(1) == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(horizon: usize, kind: ScheduleKind) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::InvalidArgument("schedule horizon must be at least 1".into()));
        }
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(horizon),
            ScheduleKind::Cosine => cosine_betas(horizon),
        };
        Ok(Self::from_betas(kind, betas))
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut running = 1.0;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        let beta_tildes = betas
            .iter()
            .enumerate()
            .map(|(i, b)| (1.0 - alpha_bars[i]) / (1.0 - alpha_bars[i + 1]) * b)
            .collect();
        NoiseSchedule { kind, betas, alphas, alpha_bars, beta_tildes }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.betas.len()
    }

    /// Errors unless `1 <= t <= T`.
    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(Error::TimestepOutOfRange { t, horizon: self.horizon() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Defined for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t - 1]
    }

    /// `beta_tilde(t)` lifted to `CLAMP_MIN` for use inside logarithms.
    pub fn beta_tilde_clamped(&self, t: usize) -> f64 {
        self.beta_tilde(t).max(CLAMP_MIN)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar(0) ..= alpha_bar(T)`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

fn linear_betas(horizon: usize) -> Vec<f64> {
    let scale = 1000.0 / horizon as f64;
    let (start, end) = (1e-4 * scale, 0.02 * scale);
    (0..horizon)
        .map(|i| {
            let frac = if horizon == 1 { 0.0 } else { i as f64 / (horizon - 1) as f64 };
            (start + (end - start) * frac).min(MAX_BETA)
        })
        .collect()
}

fn cosine_betas(horizon: usize) -> Vec<f64> {
    let f = |t: usize| {
        let x = (t as f64 / horizon as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    (1..=horizon).map(|t| (1.0 - f(t) / f(t - 1)).clamp(f64::MIN_POSITIVE, MAX_BETA)).collect()
}
