//! Equalised-learning-rate building blocks shared by the encoder, decoder
//! and discriminator. Weights are stored unit-variance and scaled by
//! `1/sqrt(fan_in)` at run time.

use crate::error::{Error, Result};
use tch::nn::{Init, Path};
use tch::Tensor;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Leaky rectifier with slope 0.2 and gain sqrt(2).
pub fn lrelu(x: &Tensor) -> Tensor {
    (x.relu() * 0.8 + x * 0.2) * SQRT_2
}

/// 2x average-pool downsampling.
pub fn downsample(x: &Tensor) -> Tensor {
    x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>)
}

/// 2x nearest-neighbour upsampling.
pub fn upsample_nearest(x: &Tensor) -> Tensor {
    let s = x.size();
    x.upsample_nearest2d([s[2] * 2, s[3] * 2], None::<f64>, None::<f64>)
}

/// 2x bilinear upsampling (half-pixel centres).
pub fn upsample_bilinear(x: &Tensor) -> Tensor {
    let s = x.size();
    x.upsample_bilinear2d([s[2] * 2, s[3] * 2], false, None::<f64>, None::<f64>)
}

#[derive(Debug)]
pub struct EqLinear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    weight_gain: f64,
    bias_gain: f64,
    activate: bool,
}

impl EqLinear {
    pub fn new(p: &Path, in_dim: i64, out_dim: i64, bias_init: Option<f64>, lr_mul: f64, activate: bool) -> Self {
        let weight = p.var("weight", &[out_dim, in_dim], Init::Randn { mean: 0.0, stdev: 1.0 / lr_mul });
        let bias = bias_init.map(|b| p.var("bias", &[out_dim], Init::Const(b / lr_mul)));
        Self { weight, bias, weight_gain: lr_mul / (in_dim as f64).sqrt(), bias_gain: lr_mul, activate }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = &self.weight * self.weight_gain;
        let mut y = x.matmul(&w.tr());
        if let Some(b) = &self.bias {
            y = y + b * self.bias_gain;
        }
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }
}

#[derive(Debug)]
pub struct EqConv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    gain: f64,
    padding: i64,
    activate: bool,
}

impl EqConv2d {
    pub fn new(p: &Path, in_ch: i64, out_ch: i64, kernel: i64, bias: bool, activate: bool) -> Self {
        let weight = p.var("weight", &[out_ch, in_ch, kernel, kernel], Init::Randn { mean: 0.0, stdev: 1.0 });
        let bias = bias.then(|| p.zeros("bias", &[out_ch]));
        Self { weight, bias, gain: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(), padding: kernel / 2, activate }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = &self.weight * self.gain;
        let y = x.conv2d(&w, self.bias.as_ref(), [1, 1], [self.padding, self.padding], [1, 1], 1);
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }

    pub fn out_channels(&self) -> i64 {
        self.weight.size()[0]
    }
}

/// Residual downsampling block: `(main + skip) / sqrt(2)` where
/// main = conv3x3 -> down -> conv3x3 and skip = down -> 1x1 projection
/// (identity when channel counts agree).
#[derive(Debug)]
pub struct ResBlockDown {
    pub conv0: EqConv2d,
    pub conv1: EqConv2d,
    pub skip: Option<EqConv2d>,
}

impl ResBlockDown {
    pub fn new(p: &Path, in_ch: i64, out_ch: i64) -> Self {
        Self {
            conv0: EqConv2d::new(&(p / "conv0"), in_ch, in_ch, 3, true, true),
            conv1: EqConv2d::new(&(p / "conv1"), in_ch, out_ch, 3, true, true),
            skip: (in_ch != out_ch).then(|| EqConv2d::new(&(p / "skip"), in_ch, out_ch, 1, false, false)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.size();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("resblock_down needs even spatial dims, got {s:?}")));
        }
        let main = self.conv1.forward(&downsample(&self.conv0.forward(x)));
        let skip = downsample(x);
        let skip = match &self.skip {
            Some(conv) => conv.forward(&skip),
            None => skip,
        };
        Ok((main + skip) / SQRT_2)
    }
}

/// True for positive powers of two.
pub fn is_pow2(v: i64) -> bool {
    v > 0 && (v & (v - 1)) == 0
}

pub fn log2(v: i64) -> i64 {
    63 - v.leading_zeros() as i64
}
