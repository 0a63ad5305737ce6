//! Residual image discriminator with a minibatch standard-deviation epilogue.

use super::layers::{is_pow2, log2, EqConv2d, EqLinear, ResBlockDown};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};
use tch::nn::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub input_res: i64,
    pub channel_base: i64,
    pub channel_max: i64,
    pub mbstd: bool,
    pub mbstd_group: i64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { input_res: 512, channel_base: 32768, channel_max: 512, mbstd: true, mbstd_group: 4 }
    }
}

impl DiscriminatorConfig {
    pub fn channels_at(&self, res: i64) -> i64 {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_pow2(self.input_res) || self.input_res < 4 {
            return Err(Error::Config(format!("discriminator input_res {} must be a power of two >= 4", self.input_res)));
        }
        Ok(())
    }
}

/// Append one channel holding the mean per-group feature standard deviation.
pub fn minibatch_stddev(x: &Tensor, group: i64) -> Tensor {
    let (b, c, h, w) = x.size4().expect("4-D feature");
    let g = (1..=group.min(b)).rev().find(|g| b % g == 0).unwrap_or(1);
    let y = x.reshape([g, -1, 1, c, h, w]);
    let y = &y - y.mean_dim([0i64].as_slice(), true, None::<Kind>);
    let y = (y.square().mean_dim([0i64].as_slice(), false, None::<Kind>) + 1e-8).sqrt();
    let y = y.mean_dim([2i64, 3, 4].as_slice(), false, None::<Kind>);
    let y = y.reshape([-1, 1, 1, 1]).repeat([g, 1, h, w]);
    Tensor::cat(&[x.shallow_clone(), y], 1)
}

#[derive(Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    pub from_rgb: EqConv2d,
    pub blocks: Vec<ResBlockDown>,
    pub conv: EqConv2d,
    pub fc: EqLinear,
    pub out: EqLinear,
}

impl Discriminator {
    pub fn new(p: &Path, config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let from_rgb = EqConv2d::new(&(p / "from_rgb"), 3, config.channels_at(config.input_res), 1, true, true);
        let mut blocks = Vec::new();
        let mut res = config.input_res;
        for i in 0..log2(config.input_res / 4) {
            blocks.push(ResBlockDown::new(&(p / "blocks" / i), config.channels_at(res), config.channels_at(res / 2)));
            res /= 2;
        }
        let c = config.channels_at(4);
        let extra = config.mbstd as i64;
        Ok(Self {
            config: config.clone(),
            from_rgb,
            blocks,
            conv: EqConv2d::new(&(p / "conv"), c + extra, c, 3, true, true),
            fc: EqLinear::new(&(p / "fc"), c * 16, c, Some(0.0), 1.0, true),
            out: EqLinear::new(&(p / "out"), c, 1, Some(0.0), 1.0, false),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// One unbounded logit per image, shape `[B]`.
    pub fn discriminate(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.size();
        let r = self.config.input_res;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!("discriminator expects [B, 3, {r}, {r}], got {s:?}")));
        }
        let mut x = self.from_rgb.forward(images);
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        if self.config.mbstd {
            x = minibatch_stddev(&x, self.config.mbstd_group);
        }
        let x = self.conv.forward(&x).flatten(1, -1);
        Ok(self.out.forward(&self.fc.forward(&x)).squeeze_dim(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::nn::VarStore;
    use tch::Device;

    fn cfg() -> DiscriminatorConfig {
        DiscriminatorConfig { input_res: 16, channel_base: 64, channel_max: 8, mbstd: true, mbstd_group: 4 }
    }

    #[test]
    fn one_score_per_image() {
        let vs = VarStore::new(Device::Cpu);
        let d = Discriminator::new(&vs.root(), &cfg()).unwrap();
        for b in [1, 3, 4, 6] {
            let x = Tensor::randn([b, 3, 16, 16], (Kind::Float, Device::Cpu));
            assert_eq!(d.discriminate(&x).unwrap().size(), vec![b]);
        }
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let vs = VarStore::new(Device::Cpu);
        let d = Discriminator::new(&vs.root(), &cfg()).unwrap();
        tch::no_grad(|| {
            for (_, mut v) in vs.variables() {
                let _ = v.zero_();
            }
            let _ = d.out.bias.as_ref().unwrap().shallow_clone().fill_(0.75);
        });
        let x = Tensor::randn([2, 3, 16, 16], (Kind::Float, Device::Cpu));
        let s = Vec::<f32>::try_from(d.discriminate(&x).unwrap()).unwrap();
        assert_eq!(s, vec![0.75, 0.75]);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let vs = VarStore::new(Device::Cpu);
        let d = Discriminator::new(&vs.root(), &cfg()).unwrap();
        assert!(d.discriminate(&Tensor::zeros([1, 3, 8, 8], (Kind::Float, Device::Cpu))).is_err());
    }
}
