use super::ParamStore;
use crate::error::Result;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Square convolution with bias; padding keeps the side for stride 1 and
/// halves it for stride 2.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng);
        Conv { weight, bias, stride, pad: kernel / 2 }
    }

    /// Sets weight and bias to zero.
    pub(crate) fn zero(&self, store: &mut ParamStore) {
        store.zero(self.weight);
        store.zero(self.bias);
    }

    pub(crate) fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.conv2d(store.get(self.weight), Some(store.get(self.bias)), self.stride, self.pad)
    }
}

/// `[n, in] -> [n, out]`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, rng: &mut StreamRng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, out], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out], fan_in, rng);
        Linear { weight, bias }
    }

    pub(crate) fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.matmul(store.get(self.weight))?.add(store.get(self.bias))
    }
}
