use serde::{Deserialize, Serialize};

use super::layers::{Conv, Linear};
use super::{sinusoidal_time_embedding, Module, ParamStore};
use crate::diffusion::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

fn default_mult() -> usize {
    2
}

/// Encoder-decoder shape. Level `l` has `base_channels * channel_mult^l`
/// channels and the input side must be divisible by `2^depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    #[serde(default = "default_mult")]
    pub channel_mult: usize,
    /// Width of the sinusoidal timestep embedding; absent for plain backbones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_dim: Option<usize>,
}

impl UNetConfig {
    fn validate(&self) -> Result<()> {
        let positive = [self.in_channels, self.out_channels, self.base_channels, self.depth, self.channel_mult];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument(format!("U-Net sizes must be positive: {self:?}")));
        }
        if let Some(d) = self.time_dim {
            if d == 0 || d % 2 != 0 {
                return Err(Error::InvalidArgument(format!("time_dim {d} must be even and positive")));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult.pow(level as u32)
    }
}

/// Convolution followed by an optional per-channel timestep bias and SiLU.
#[derive(Debug, Clone)]
struct Block {
    conv: Conv,
    time: Option<Linear>,
}

impl Block {
    fn forward(&self, store: &ParamStore, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv.forward(store, x)?;
        if let (Some(proj), Some(temb)) = (&self.time, temb) {
            let bias = proj.forward(store, temb)?;
            let (rows, ch) = (bias.shape()[0], bias.shape()[1]);
            h = h.add(&bias.reshape(&[rows, ch, 1, 1])?)?;
        }
        Ok(h.silu())
    }
}

#[derive(Debug, Clone)]
struct UNet {
    config: UNetConfig,
    store: ParamStore,
    stem: Conv,
    down_blocks: Vec<Block>,
    downsample: Vec<Conv>,
    mid: Block,
    upsample: Vec<Conv>,
    up_blocks: Vec<Block>,
    head: Conv,
}

impl UNet {
    fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0);
        let mut store = ParamStore::default();
        let time_dim = config.time_dim;
        let block = |store: &mut ParamStore, rng: &mut rng::StreamRng, name: &str, cin: usize, cout: usize| Block {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, 3, 1, rng),
            time: time_dim.map(|d| Linear::new(store, &format!("{name}.time"), d, cout, rng)),
        };

        let c0 = config.channels(0);
        let stem = Conv::new(&mut store, "stem", config.in_channels, c0, 3, 1, &mut rng);
        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        for l in 0..config.depth {
            let c = config.channels(l);
            down_blocks.push(block(&mut store, &mut rng, &format!("down{l}"), c, c));
            downsample.push(Conv::new(&mut store, &format!("down{l}.pool"), c, config.channels(l + 1), 3, 2, &mut rng));
        }
        let cb = config.channels(config.depth);
        let mid = block(&mut store, &mut rng, "mid", cb, cb);
        let mut upsample = Vec::new();
        let mut up_blocks = Vec::new();
        for l in (0..config.depth).rev() {
            let c = config.channels(l);
            upsample.push(Conv::new(&mut store, &format!("up{l}.unpool"), config.channels(l + 1), c, 3, 1, &mut rng));
            up_blocks.push(block(&mut store, &mut rng, &format!("up{l}"), 2 * c, c));
        }
        let head = Conv::new(&mut store, "head", c0, config.out_channels, 3, 1, &mut rng);
        Ok(UNet { config, store, stem, down_blocks, downsample, mid, upsample, up_blocks, head })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let factor = 1 << self.config.depth;
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "expected input [batch, {}, h, w], got {s:?}",
                self.config.in_channels
            )));
        }
        if s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial size {}x{} not divisible by 2^{}",
                s[2], s[3], self.config.depth
            )));
        }
        Ok(())
    }

    /// Output and the largest absolute hidden activation.
    fn run(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<(Tensor, f64)> {
        self.check_input(x)?;
        let store = &self.store;
        let mut peak: f64 = 0.0;
        let mut track = |t: Tensor| {
            peak = t.data().iter().fold(peak, |m, v| m.max(v.abs()));
            t
        };
        let mut h = track(self.stem.forward(store, x)?.silu());
        let mut skips = Vec::with_capacity(self.config.depth);
        for (block, down) in self.down_blocks.iter().zip(&self.downsample) {
            h = track(block.forward(store, &h, temb)?);
            skips.push(h.clone());
            h = track(down.forward(store, &h)?.silu());
        }
        h = track(self.mid.forward(store, &h, temb)?);
        for (up, block) in self.upsample.iter().zip(&self.up_blocks) {
            let skip = skips.pop().expect("one skip per level");
            h = track(up.forward(store, &h.upsample_nearest(2)?)?.silu());
            h = track(block.forward(store, &Tensor::concat(&[h, skip], 1)?, temb)?);
        }
        let out = self.head.forward(store, &h)?;
        Ok((out, peak))
    }
}

/// Timestep-conditioned U-Net predicting noise and variance weights.
#[derive(Debug, Clone)]
pub struct MiniUNet {
    net: UNet,
}

impl MiniUNet {
    /// `channels` is the number of data channels; the head emits twice that.
    pub fn new(channels: usize, base_channels: usize, depth: usize, time_dim: usize, seed: u64) -> Result<Self> {
        let config = UNetConfig {
            in_channels: channels,
            out_channels: 2 * channels,
            base_channels,
            depth,
            channel_mult: default_mult(),
            time_dim: Some(time_dim),
        };
        Self::from_config(config, seed)
    }

    pub fn from_config(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.time_dim.is_none() || config.out_channels != 2 * config.in_channels {
            return Err(Error::InvalidArgument(
                "denoiser needs a time embedding and twice as many output channels as inputs".into(),
            ));
        }
        // Zero output layer: an untrained denoiser predicts no noise and the
        // midpoint variance, so the reverse chain starts as a pure rescaling.
        let mut net = UNet::new(config, seed)?;
        net.head.zero(&mut net.store);
        Ok(MiniUNet { net })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    fn embedding(&self, ts: &[usize], batch: usize) -> Result<Tensor> {
        let dim = self.net.config.time_dim.expect("checked at construction");
        if ts.is_empty() || (ts.len() != 1 && ts.len() != batch) {
            return Err(Error::InvalidArgument(format!("{} timesteps for a batch of {batch}", ts.len())));
        }
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            data.extend(sinusoidal_time_embedding(t, dim)?);
        }
        Tensor::new(data, &[ts.len(), dim])
    }

    fn run(&self, xt: &Tensor, ts: &[usize]) -> Result<(DenoiserOutput, f64)> {
        let batch = xt.shape().first().copied().unwrap_or(0);
        let temb = self.embedding(ts, batch)?;
        let (out, peak) = self.net.run(xt, Some(&temb))?;
        let c = self.net.config.in_channels;
        let eps = out.narrow(1, 0, c)?;
        let v = out.narrow(1, c, c)?.sigmoid();
        Ok((DenoiserOutput { eps, v }, peak))
    }

    /// Largest absolute hidden activation of a forward pass.
    pub fn peak_activation(&self, xt: &Tensor, ts: &[usize]) -> Result<f64> {
        Ok(self.run(xt, ts)?.1)
    }
}

impl Denoiser for MiniUNet {
    fn denoise(&self, xt: &Tensor, ts: &[usize]) -> Result<DenoiserOutput> {
        Ok(self.run(xt, ts)?.0)
    }
}

impl Module for MiniUNet {
    fn params(&self) -> &ParamStore {
        &self.net.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.net.store
    }
}

/// Encoder-decoder producing per-pixel class logits.
#[derive(Debug, Clone)]
pub struct SegmentationNet {
    net: UNet,
}

impl SegmentationNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.time_dim.is_some() {
            return Err(Error::InvalidArgument("segmentation backbone takes no time embedding".into()));
        }
        Ok(SegmentationNet { net: UNet::new(config, seed)? })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.run(x, None)?.0)
    }

    pub fn peak_activation(&self, x: &Tensor) -> Result<f64> {
        Ok(self.net.run(x, None)?.1)
    }
}

impl Module for SegmentationNet {
    fn params(&self) -> &ParamStore {
        &self.net.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.net.store
    }
}
