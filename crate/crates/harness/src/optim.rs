use anyhow::{bail, ensure, Result};
use bgdb_core::nets::ParamStore;
use serde::{Deserialize, Serialize};

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default)]
        momentum: f64,
    },
    /// Adam with L2 regularisation folded into the gradient.
    Adam {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_betas")]
        betas: (f64, f64),
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Adamw {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_betas")]
        betas: (f64, f64),
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerConfig {
    /// AdamW with lr 1e-4 and weight decay 1e-5.
    pub fn adamw_default() -> Self {
        OptimizerConfig::Adamw { lr: 1e-4, weight_decay: 1e-5, betas: default_betas(), eps: default_eps() }
    }

    /// SGD with lr 0.01 and weight decay 1e-4.
    pub fn sgd_default() -> Self {
        OptimizerConfig::Sgd { lr: 0.01, weight_decay: 1e-4, momentum: 0.0 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Adamw { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        ensure!(lr.is_finite() && lr > 0.0, "learning rate {lr} must be positive");
        match *self {
            OptimizerConfig::Sgd { weight_decay, momentum, .. } => {
                ensure!(weight_decay >= 0.0 && weight_decay.is_finite(), "weight_decay {weight_decay} must be nonnegative");
                ensure!((0.0..1.0).contains(&momentum), "momentum {momentum} must lie in [0, 1)");
            }
            OptimizerConfig::Adam { weight_decay, betas, eps, .. }
            | OptimizerConfig::Adamw { weight_decay, betas, eps, .. } => {
                ensure!(weight_decay >= 0.0 && weight_decay.is_finite(), "weight_decay {weight_decay} must be nonnegative");
                ensure!(
                    (0.0..1.0).contains(&betas.0) && (0.0..1.0).contains(&betas.1),
                    "betas {betas:?} must lie in [0, 1)"
                );
                ensure!(eps > 0.0, "eps {eps} must be positive");
            }
        }
        Ok(())
    }
}

fn check_lengths(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        bail!("{} parameters but {} gradients", params.len(), grads.len());
    }
    Ok(())
}

/// `p <- p - lr (g + wd p)`, with a heavy-ball buffer when `velocity` is given.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: Option<(&mut [f64], f64)>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_lengths(params, grads)?;
    match velocity {
        None => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * (g + weight_decay * *p);
            }
        }
        Some((buf, momentum)) => {
            check_lengths(params, buf)?;
            for ((p, g), b) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
                *b = momentum * *b + g + weight_decay * *p;
                *p -= lr * *b;
            }
        }
    }
    Ok(())
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

fn adaptive_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, betas: (f64, f64), eps: f64, l2: f64) {
    let (b1, b2) = betas;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i] + l2 * params[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn check_state(params: &[f64], grads: &[f64], state: &AdamState) -> Result<()> {
    check_lengths(params, grads)?;
    if state.m.len() != params.len() || state.v.len() != params.len() {
        bail!("optimizer state holds {} entries for {} parameters", state.m.len(), params.len());
    }
    Ok(())
}

/// Adam; `weight_decay` is added to the gradient as an L2 term.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    check_state(params, grads, state)?;
    adaptive_step(params, grads, state, lr, betas, eps, weight_decay);
    Ok(())
}

/// AdamW: `p <- p (1 - lr wd)` and then the plain Adam step.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    check_state(params, grads, state)?;
    if weight_decay != 0.0 {
        for p in params.iter_mut() {
            *p *= 1.0 - lr * weight_decay;
        }
    }
    adaptive_step(params, grads, state, lr, betas, eps, 0.0);
    Ok(())
}

#[derive(Debug, Clone)]
enum Slot {
    Empty,
    Velocity(Vec<f64>),
    Adam(AdamState),
}

/// Optimizer state for every tensor of a fixed sequence of parameter stores.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    max_grad_norm: Option<f64>,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, max_grad_norm: None, slots: Vec::new() })
    }

    /// Rescales each step's gradients so their joint L2 norm is at most
    /// `max_norm`.
    pub fn with_max_grad_norm(mut self, max_norm: Option<f64>) -> Result<Self> {
        if let Some(m) = max_norm {
            ensure!(m.is_finite() && m > 0.0, "gradient norm bound {m} must be positive");
        }
        self.max_grad_norm = max_norm;
        Ok(self)
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Updates every parameter that received a gradient. Parameters without
    /// one keep their value and state. The stores must be passed in the same
    /// order on every call.
    pub fn step(&mut self, stores: &mut [&mut ParamStore]) -> Result<()> {
        let total: usize = stores.iter().map(|s| s.len()).sum();
        if self.slots.is_empty() {
            self.slots = vec![Slot::Empty; total];
        }
        ensure!(self.slots.len() == total, "optimizer built for {} tensors, got {total}", self.slots.len());
        let scale = match self.max_grad_norm {
            Some(max_norm) => {
                let sq: f64 = stores
                    .iter()
                    .flat_map(|s| s.tensors())
                    .filter_map(|t| t.grad())
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > max_norm { max_norm / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let mut slot = 0;
        for store in stores.iter_mut() {
            let mut values = Vec::with_capacity(store.len());
            for t in store.tensors() {
                let mut p = t.to_vec();
                if let Some(mut g) = t.grad() {
                    if scale != 1.0 {
                        g.iter_mut().for_each(|x| *x *= scale);
                    }
                    self.update(slot, &mut p, &g)?;
                }
                values.push(p);
                slot += 1;
            }
            store.set_values(values)?;
        }
        Ok(())
    }

    fn update(&mut self, slot: usize, p: &mut [f64], g: &[f64]) -> Result<()> {
        let state = &mut self.slots[slot];
        match self.config {
            OptimizerConfig::Sgd { lr, weight_decay, momentum } => {
                if momentum == 0.0 {
                    return sgd_step(p, g, None, lr, weight_decay);
                }
                if matches!(state, Slot::Empty) {
                    *state = Slot::Velocity(vec![0.0; p.len()]);
                }
                let Slot::Velocity(buf) = state else { unreachable!() };
                sgd_step(p, g, Some((buf, momentum)), lr, weight_decay)
            }
            OptimizerConfig::Adam { lr, weight_decay, betas, eps }
            | OptimizerConfig::Adamw { lr, weight_decay, betas, eps } => {
                if matches!(state, Slot::Empty) {
                    *state = Slot::Adam(AdamState::new(p.len()));
                }
                let Slot::Adam(s) = state else { unreachable!() };
                if matches!(self.config, OptimizerConfig::Adam { .. }) {
                    adam_step(p, g, s, lr, betas, eps, weight_decay)
                } else {
                    adamw_step(p, g, s, lr, betas, eps, weight_decay)
                }
            }
        }
    }
}
