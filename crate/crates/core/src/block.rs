//! The Bernoulli-Gaussian decision block: a training-time head that feeds the
//! backbone logits through a diffusion denoiser and supervises the reverse
//! chain's mean and variance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{l_hybrid, p_sample_chain, Denoiser, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nets::{Backbone, MiniUNet, Module, UNetConfig};
use crate::rng::StreamRng;
use crate::tensor::{no_grad, Activation, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// Loss applied directly to the backbone logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    /// Soft Dice on the activated logits, averaged over classes.
    Dice,
    CrossEntropy,
}

impl TaskLoss {
    pub fn apply(self, logits: &Tensor, labels: &Tensor, act: Activation) -> Result<Tensor> {
        match self {
            TaskLoss::Dice => soft_dice_loss(&logits.activate(act)?, labels),
            TaskLoss::CrossEntropy => match act {
                Activation::Softmax => logits.cross_entropy(labels),
                Activation::Sigmoid => logits.bce_after(labels, act),
            },
        }
    }
}

/// `1 - mean_c (2 sum(p y) + 1) / (sum(p) + sum(y) + 1)` over classes `c`,
/// pooling batch and space.
pub fn soft_dice_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    probs.expect_same_shape(labels)?;
    let s = probs.shape();
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!("dice needs [batch, classes, ..], got {s:?}")));
    }
    let per_class = |x: &Tensor| -> Result<Tensor> {
        // [b, c, rest] -> sum over b and rest -> [c]
        let rest: usize = s[2..].iter().product();
        x.reshape(&[s[0], s[1], rest])?.sum_axis(2, false)?.sum_axis(0, false)
    };
    let inter = per_class(&probs.mul(labels)?)?;
    let total = per_class(probs)?.add(&per_class(labels)?)?;
    let dice = inter.mul_scalar(2.0).add_scalar(1.0).div(&total.add_scalar(1.0))?;
    Ok(dice.mean().neg().add_scalar(1.0))
}

fn default_lambda1() -> f64 {
    1e-3
}

fn one() -> f64 {
    1.0
}

fn default_horizon() -> usize {
    25
}

fn default_side() -> usize {
    64
}

fn default_activation() -> Activation {
    Activation::Sigmoid
}

/// Shape of the block's denoiser; its channel count follows the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub time_dim: usize,
    #[serde(default = "default_mult")]
    pub channel_mult: usize,
}

fn default_mult() -> usize {
    2
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { base_channels: 8, depth: 2, time_dim: 32, channel_mult: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgdbConfig {
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "one")]
    pub lambda2: f64,
    #[serde(default = "one")]
    pub lambda3: f64,
    /// Number of diffusion steps `T`.
    #[serde(default = "default_horizon", alias = "T")]
    pub horizon: usize,
    #[serde(default)]
    pub schedule: ScheduleKind,
    /// The squashing function `F` applied before the mean loss.
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_side")]
    pub logit_side: usize,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
}

impl Default for BgdbConfig {
    fn default() -> Self {
        BgdbConfig {
            lambda1: default_lambda1(),
            lambda2: 1.0,
            lambda3: 1.0,
            horizon: default_horizon(),
            schedule: ScheduleKind::default(),
            activation: default_activation(),
            logit_side: default_side(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl BgdbConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {w} must be finite and nonnegative")));
            }
        }
        if self.horizon < 1 {
            return Err(Error::InvalidArgument("T must be at least 1".into()));
        }
        if !self.logit_side.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("logit_side {} is not a power of 2", self.logit_side)));
        }
        if self.logit_side % (1 << self.denoiser.depth) != 0 {
            return Err(Error::InvalidArgument(format!(
                "logit_side {} not divisible by 2^{}",
                self.logit_side, self.denoiser.depth
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.horizon, self.schedule)
    }
}

/// Scalar values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_y: f64,
    pub l_simple: f64,
    pub l_vlb: f64,
    pub l_mu: f64,
    pub l_sigma: f64,
    pub total: f64,
}

/// The differentiable total together with its components.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn finite(name: &str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(name.into()))
    }
}

fn tracked_if<T>(tracked: bool, f: impl FnOnce() -> T) -> T {
    if tracked {
        f()
    } else {
        no_grad(f)
    }
}

/// Treats `[batch, classes]` as `1x1` maps, then replicates (upsampling) or
/// averages (downsampling) to `side x side`.
pub fn resize_logits(logits: &Tensor, side: usize) -> Result<Tensor> {
    if !side.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("side {side} is not a power of 2")));
    }
    let maps = match logits.shape() {
        [b, c] => logits.reshape(&[*b, *c, 1, 1])?,
        [_, _, h, w] if h == w => logits.clone(),
        s => return Err(Error::InvalidArgument(format!("cannot resize logits of shape {s:?}"))),
    };
    let from = maps.shape()[2];
    if from == side {
        Ok(maps)
    } else if side > from && side % from == 0 {
        maps.upsample_nearest(side / from)
    } else if from > side && from % side == 0 {
        maps.avg_pool2d(from / side)
    } else {
        Err(Error::InvalidArgument(format!("no integer ratio between {from} and {side}")))
    }
}

/// Per-pixel means for segmentation; spatial averages `[batch, classes]` for
/// classification.
pub fn aggregate_mu(mu: &Tensor, task: Task) -> Result<Tensor> {
    match task {
        Task::Segmentation => Ok(mu.clone()),
        Task::Classification => {
            let s = mu.shape();
            if s.len() != 4 {
                return Err(Error::InvalidArgument(format!("expected [batch, classes, h, w], got {s:?}")));
            }
            mu.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2, false)
        }
    }
}

/// Composite objective
/// `L_y + lambda2 (L_simple + lambda1 L_vlb) + lambda3 (L_mu + L_sigma)`.
///
/// The logits are resized to `cfg.logit_side`, used as diffusion data for the
/// hybrid loss (one uniform timestep and fresh noise per item) and as the
/// start of the reverse chain whose final mean and variance feed `L_mu` and
/// `L_sigma`. A term with zero weight is still evaluated, without gradient.
pub fn bgdb_loss<R: Rng + ?Sized>(
    logits: &Tensor,
    labels: &Tensor,
    task_loss: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor>,
    denoiser: &dyn Denoiser,
    cfg: &BgdbConfig,
    rng: &mut R,
) -> Result<CompositeLoss> {
    cfg.validate()?;
    logits.expect_same_shape(labels)?;
    let task = if logits.ndim() == 2 { Task::Classification } else { Task::Segmentation };
    let schedule = cfg.schedule()?;

    let l_y = finite("l_y", task_loss(logits, labels)?)?;
    let x0 = resize_logits(logits, cfg.logit_side)?;
    let target = resize_logits(labels, cfg.logit_side)?;

    let hybrid = || {
        let ts: Vec<usize> = (0..x0.shape()[0]).map(|_| rng.random_range(1..=cfg.horizon)).collect();
        let eps = Tensor::randn(x0.shape(), rng);
        l_hybrid(&x0, &ts, &eps, denoiser, &schedule, cfg.lambda1)
    };
    let hybrid = tracked_if(cfg.lambda2 != 0.0, hybrid)?;
    let l_simple = finite("l_simple", hybrid.simple)?;
    let l_vlb = finite("l_vlb", hybrid.vlb)?;

    let bernoulli = || -> Result<(Tensor, Tensor)> {
        let (mu, sigma) = p_sample_chain(&x0, denoiser, &schedule, rng)?;
        let l_mu = match task {
            Task::Segmentation => mu.bce_after(&target, cfg.activation)?,
            Task::Classification => aggregate_mu(&mu, task)?.bce_after(labels, cfg.activation)?,
        };
        Ok((l_mu, sigma.mse(&Tensor::zeros(sigma.shape()))?))
    };
    let (l_mu, l_sigma) = tracked_if(cfg.lambda3 != 0.0, bernoulli)?;
    let l_mu = finite("l_mu", l_mu)?;
    let l_sigma = finite("l_sigma", l_sigma)?;

    let diffusion = l_simple.add(&l_vlb.mul_scalar(cfg.lambda1))?.mul_scalar(cfg.lambda2);
    let bt = l_mu.add(&l_sigma)?.mul_scalar(cfg.lambda3);
    let total = finite("total", l_y.add(&diffusion)?.add(&bt)?)?;
    let breakdown = LossBreakdown {
        l_y: l_y.item(),
        l_simple: l_simple.item(),
        l_vlb: l_vlb.item(),
        l_mu: l_mu.item(),
        l_sigma: l_sigma.item(),
        total: total.item(),
    };
    Ok(CompositeLoss { total, breakdown })
}

/// A backbone trained together with the block's denoiser.
#[derive(Debug, Clone)]
pub struct CompositeModel {
    pub backbone: Backbone,
    pub denoiser: MiniUNet,
    pub config: BgdbConfig,
}

impl CompositeModel {
    /// The denoiser works on as many channels as the backbone has classes and
    /// is initialised from its own seed stream.
    pub fn new(backbone: Backbone, config: BgdbConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = &config.denoiser;
        let denoiser = MiniUNet::from_config(
            UNetConfig {
                in_channels: backbone.classes(),
                out_channels: 2 * backbone.classes(),
                base_channels: d.base_channels,
                depth: d.depth,
                channel_mult: d.channel_mult,
                time_dim: Some(d.time_dim),
            },
            seed,
        )?;
        Ok(CompositeModel { backbone, denoiser, config })
    }

    pub fn backbone_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.forward(x)
    }

    pub fn loss(
        &self,
        x: &Tensor,
        labels: &Tensor,
        task_loss: TaskLoss,
        rng: &mut StreamRng,
    ) -> Result<CompositeLoss> {
        let logits = self.backbone_logits(x)?;
        let act = self.config.activation;
        let f = move |l: &Tensor, y: &Tensor| task_loss.apply(l, y, act);
        bgdb_loss(&logits, labels, &f, &self.denoiser, &self.config, rng)
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.denoiser.num_params()
    }

    /// Drops the denoiser; the backbone is returned untouched.
    pub fn strip_for_inference(self) -> Backbone {
        self.backbone
    }
}
