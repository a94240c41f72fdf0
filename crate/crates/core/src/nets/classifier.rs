use serde::{Deserialize, Serialize};

use super::layers::{Conv, Linear};
use super::{Module, ParamStore};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Two 1x1 convolutions, global average pooling and a linear head. Feature
/// vectors `[batch, features]` are treated as `1x1` images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_features: usize,
    pub hidden: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    store: ParamStore,
    conv1: Conv,
    conv2: Conv,
    head: Linear,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.in_features == 0 || config.hidden == 0 || config.classes == 0 {
            return Err(Error::InvalidArgument(format!("classifier sizes must be positive: {config:?}")));
        }
        let mut rng = rng::stream(seed, 0);
        let mut store = ParamStore::default();
        let conv1 = Conv::new(&mut store, "conv1", config.in_features, config.hidden, 1, 1, &mut rng);
        let conv2 = Conv::new(&mut store, "conv2", config.hidden, config.hidden, 1, 1, &mut rng);
        let head = Linear::new(&mut store, "head", config.hidden, config.classes, &mut rng);
        Ok(Classifier { config, store, conv1, conv2, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Logits `[batch, classes]` from `[batch, features]` or
    /// `[batch, features, h, w]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let x = match s.len() {
            2 => x.reshape(&[s[0], s[1], 1, 1])?,
            4 => x.clone(),
            _ => return Err(Error::InvalidArgument(format!("classifier input of shape {s:?}"))),
        };
        if x.shape()[1] != self.config.in_features {
            return Err(Error::InvalidArgument(format!(
                "expected {} features, got {}",
                self.config.in_features,
                x.shape()[1]
            )));
        }
        let h = self.conv1.forward(&self.store, &x)?.silu();
        let h = self.conv2.forward(&self.store, &h)?.silu();
        let (b, c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
        let pooled = h.reshape(&[b, c, hh * ww])?.mean_axis(2, false)?;
        self.head.forward(&self.store, &pooled)
    }
}

impl Module for Classifier {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}
