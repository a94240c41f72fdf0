//! Small trainable networks: a time-conditioned U-Net denoiser and toy
//! backbones for segmentation and point classification.

mod checkpoint;
mod classifier;
mod layers;
mod unet;


use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use classifier::{Classifier, ClassifierConfig};
pub use unet::{MiniUNet, SegmentationNet, UNetConfig};

/// Named trainable tensors in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    /// Adds a parameter drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub(crate) fn add_uniform(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.push(name, Tensor::parameter(data, shape).expect("valid parameter shape"))
    }

    pub(crate) fn zero(&mut self, index: usize) {
        let shape = self.tensors[index].shape().to_vec();
        self.tensors[index] = Tensor::parameter(vec![0.0; self.tensors[index].numel()], &shape).expect("same shape");
    }

    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch { lhs: old.shape().to_vec(), rhs: new.shape().to_vec() });
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Fresh leaf tensors holding `values`, one vector per parameter.
    pub fn set_values(&mut self, values: Vec<Vec<f64>>) -> Result<()> {
        let tensors = values
            .into_iter()
            .zip(&self.tensors)
            .map(|(v, old)| Tensor::parameter(v, old.shape()))
            .collect::<Result<Vec<_>>>()?;
        self.set_tensors(tensors)
    }

    /// Adds independent `N(0, scale^2)` noise to every value. Moves a model
    /// away from structured initialisations such as a zeroed output layer.
    pub fn perturb<R: rand::Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) -> Result<()> {
        let values = self
            .tensors
            .iter()
            .map(|t| {
                let noise = Tensor::randn(t.shape(), rng);
                t.data().iter().zip(noise.data().iter()).map(|(v, e)| v + scale * e).collect()
            })
            .collect();
        self.set_values(values)
    }

    /// Copies values from `other` by name; every name must be present with
    /// the same shape.
    pub(crate) fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                other.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let src = &other.tensors[j];
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = Tensor::parameter(src.to_vec(), src.shape())?;
        }
        Ok(())
    }
}

/// Anything owning a [`ParamStore`].
pub trait Module {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn num_params(&self) -> usize {
        self.params().num_scalars()
    }
}

/// Sinusoidal embedding of a timestep: `sin(t w_i)` for the first half and
/// `cos(t w_i)` for the second, with `w_i = 10000^(-i / half)`.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dimension {dim} must be even and positive")));
    }
    let half = dim / 2;
    let angles: Vec<f64> = (0..half)
        .map(|i| t as f64 * 10000f64.powf(-(i as f64) / half as f64))
        .collect();
    Ok(angles.iter().map(|a| a.sin()).chain(angles.iter().map(|a| a.cos())).collect())
}

/// Backbone choice for an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Segmentation(UNetConfig),
    Classifier(ClassifierConfig),
}

/// A backbone producing class logits: `[batch, classes, h, w]` for
/// segmentation, `[batch, classes]` for classification.
#[derive(Debug, Clone)]
pub enum Backbone {
    Segmentation(SegmentationNet),
    Classifier(Classifier),
}

impl Backbone {
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            BackboneConfig::Segmentation(c) => Backbone::Segmentation(SegmentationNet::new(c.clone(), seed)?),
            BackboneConfig::Classifier(c) => Backbone::Classifier(Classifier::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> BackboneConfig {
        match self {
            Backbone::Segmentation(n) => BackboneConfig::Segmentation(n.config().clone()),
            Backbone::Classifier(n) => BackboneConfig::Classifier(n.config().clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Segmentation(n) => n.forward(x),
            Backbone::Classifier(n) => n.forward(x),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Backbone::Segmentation(n) => n.config().out_channels,
            Backbone::Classifier(n) => n.config().classes,
        }
    }
}

impl Module for Backbone {
    fn params(&self) -> &ParamStore {
        match self {
            Backbone::Segmentation(n) => n.params(),
            Backbone::Classifier(n) => n.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Backbone::Segmentation(n) => n.params_mut(),
            Backbone::Classifier(n) => n.params_mut(),
        }
    }
}
