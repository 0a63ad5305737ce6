//! Style-modulated synthesis network (skip architecture) that starts from a
//! spatial feature instead of a learned constant.
//!
//! A generator that would normally start at 4x4 skips its first
//! `K = log2(phi_res) - 2` blocks; the remaining `log2(output_res / phi_res)`
//! upsampling blocks each accumulate into the RGB output through a 1x1
//! modulated projection.

use super::layers::{is_pow2, log2, lrelu, upsample_bilinear, upsample_nearest, EqLinear};
use crate::error::{Error, Result};
use crate::tensor::randn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{Init, Path};
use tch::{Kind, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub output_res: i64,
    pub phi_res: i64,
    pub phi_channels: i64,
    pub latent_dim: i64,
    pub style_dim: i64,
    pub mapping_depth: usize,
    pub mapping_lr_mul: f64,
    /// Feature channels at resolution `r` are `min(channel_base / r, channel_max)`.
    pub channel_base: i64,
    pub channel_max: i64,
    /// Per-layer additive noise inputs.
    pub use_noise: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            output_res: 512,
            phi_res: 32,
            phi_channels: 512,
            latent_dim: 512,
            style_dim: 512,
            mapping_depth: 8,
            mapping_lr_mul: 0.01,
            channel_base: 32768,
            channel_max: 512,
            use_noise: true,
        }
    }
}

/// Number of StyleGAN2 blocks (from 4x4) replaced by a `phi_res` input.
pub fn compute_skip_k(phi_res: i64) -> Result<i64> {
    if phi_res < 4 || !is_pow2(phi_res) {
        return Err(Error::InvalidArgument(format!("phi_res {phi_res} must be a power of two >= 4")));
    }
    Ok(log2(phi_res) - 2)
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        compute_skip_k(self.phi_res)?;
        if !is_pow2(self.output_res) || self.output_res <= self.phi_res {
            return Err(Error::Config(format!(
                "output_res {} must be a power of two above phi_res {}",
                self.output_res, self.phi_res
            )));
        }
        if self.mapping_depth == 0 && self.style_dim != self.latent_dim {
            return Err(Error::Config("mapping_depth 0 requires style_dim == latent_dim".into()));
        }
        Ok(())
    }

    pub fn skip_k(&self) -> i64 {
        compute_skip_k(self.phi_res).unwrap_or(0)
    }

    pub fn num_blocks(&self) -> usize {
        log2(self.output_res / self.phi_res) as usize
    }

    pub fn channels_at(&self, res: i64) -> i64 {
        (self.channel_base / res).clamp(1, self.channel_max)
    }
}

/// Source of per-layer noise.
pub enum Noise<'a> {
    Off,
    Sampled(&'a mut ChaCha8Rng),
}

/// Convolution with per-sample, per-input-channel weight scaling `styles`
/// (`[B, in]`) and optional per-filter demodulation.
pub fn modulated_conv(x: &Tensor, styles: &Tensor, weight: &Tensor, demodulate: bool) -> Result<Tensor> {
    let xs = x.size();
    let ws = weight.size();
    let ss = styles.size();
    if xs.len() != 4 || ws.len() != 4 || ss.len() != 2 || xs[1] != ws[1] || ss[1] != ws[1] || ss[0] != xs[0] {
        return Err(Error::Shape(format!("modulated_conv: x {xs:?}, styles {ss:?}, weight {ws:?}")));
    }
    let (b, in_ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (out_ch, k) = (ws[0], ws[2]);
    let mut wgt = weight.unsqueeze(0) * styles.reshape([b, 1, in_ch, 1, 1]);
    if demodulate {
        let d = (wgt.square().sum_dim_intlist([2i64, 3, 4].as_slice(), true, None::<Kind>) + 1e-8).rsqrt();
        wgt = wgt * d;
    }
    let wgt = wgt.reshape([b * out_ch, in_ch, k, k]);
    let y = x
        .reshape([1, b * in_ch, h, w])
        .conv2d(&wgt, None::<Tensor>, [1, 1], [k / 2, k / 2], [1, 1], b);
    Ok(y.reshape([b, out_ch, h, w]))
}

#[derive(Debug)]
pub struct SynthesisLayer {
    pub affine: EqLinear,
    pub weight: Tensor,
    pub bias: Tensor,
    pub noise_strength: Tensor,
    gain: f64,
    up: bool,
}

impl SynthesisLayer {
    fn new(p: &Path, style_dim: i64, in_ch: i64, out_ch: i64, up: bool) -> Self {
        Self {
            affine: EqLinear::new(&(p / "affine"), style_dim, in_ch, Some(1.0), 1.0, false),
            weight: p.var("weight", &[out_ch, in_ch, 3, 3], Init::Randn { mean: 0.0, stdev: 1.0 }),
            bias: p.zeros("bias", &[out_ch]),
            noise_strength: p.zeros("noise_strength", &[1]),
            gain: 1.0 / ((in_ch * 9) as f64).sqrt(),
            up,
        }
    }

    fn forward(&self, x: &Tensor, w: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        let x = if self.up { upsample_nearest(x) } else { x.shallow_clone() };
        let styles = self.affine.forward(w);
        let mut y = modulated_conv(&x, &styles, &(&self.weight * self.gain), true)?;
        if let Noise::Sampled(rng) = noise {
            let s = y.size();
            let n = randn(rng, &[s[0], 1, s[2], s[3]], y.kind()) * &self.noise_strength;
            y = y + n;
        }
        Ok(lrelu(&(y + self.bias.reshape([1, -1, 1, 1]))))
    }
}

#[derive(Debug)]
pub struct ToRgb {
    pub affine: EqLinear,
    pub weight: Tensor,
    pub bias: Tensor,
    gain: f64,
}

impl ToRgb {
    fn new(p: &Path, style_dim: i64, in_ch: i64) -> Self {
        Self {
            affine: EqLinear::new(&(p / "affine"), style_dim, in_ch, Some(1.0), 1.0, false),
            weight: p.var("weight", &[3, in_ch, 1, 1], Init::Randn { mean: 0.0, stdev: 1.0 }),
            bias: p.zeros("bias", &[3]),
            gain: 1.0 / (in_ch as f64).sqrt(),
        }
    }

    fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let styles = self.affine.forward(w) * self.gain;
        Ok(modulated_conv(x, &styles, &self.weight, false)? + self.bias.reshape([1, -1, 1, 1]))
    }
}

#[derive(Debug)]
pub struct SynthesisBlock {
    pub conv0: SynthesisLayer,
    pub conv1: SynthesisLayer,
    pub torgb: ToRgb,
}

#[derive(Debug)]
pub struct Decoder {
    config: DecoderConfig,
    pub mapping: Vec<EqLinear>,
    pub blocks: Vec<SynthesisBlock>,
}

impl Decoder {
    pub fn new(p: &Path, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mp = p / "mapping";
        let mapping = (0..config.mapping_depth)
            .map(|i| {
                let in_dim = if i == 0 { config.latent_dim } else { config.style_dim };
                EqLinear::new(&(&mp / i), in_dim, config.style_dim, Some(0.0), config.mapping_lr_mul, true)
            })
            .collect();
        let mut blocks = Vec::new();
        let mut in_ch = config.phi_channels;
        let mut res = config.phi_res;
        for i in 0..config.num_blocks() {
            res *= 2;
            let out_ch = config.channels_at(res);
            let bp = p / "blocks" / i;
            blocks.push(SynthesisBlock {
                conv0: SynthesisLayer::new(&(&bp / "conv0"), config.style_dim, in_ch, out_ch, true),
                conv1: SynthesisLayer::new(&(&bp / "conv1"), config.style_dim, out_ch, out_ch, false),
                torgb: ToRgb::new(&(&bp / "torgb"), config.style_dim, out_ch),
            });
            in_ch = out_ch;
        }
        Ok(Self { config: config.clone(), mapping, blocks })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Mapping network: RMS-normalise `z`, then the fully-connected stack.
    pub fn map_latent(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.size();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::Shape(format!("latent must be [B, {}], got {s:?}", self.config.latent_dim)));
        }
        let mut w = z * (z.square().mean_dim([1i64].as_slice(), true, None::<Kind>) + 1e-8).rsqrt();
        for layer in &self.mapping {
            w = layer.forward(&w);
        }
        Ok(w)
    }

    /// Synthesis from a spatial feature and a style vector.
    pub fn synthesize(&self, phi: &Tensor, w: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        let s = phi.size();
        if s.len() != 4 || s[1] != self.config.phi_channels || s[2].min(s[3]) != self.config.phi_res {
            return Err(Error::Shape(format!(
                "decoder expects [B, {}, {r}, >= {r}] feature, got {s:?}",
                self.config.phi_channels,
                r = self.config.phi_res
            )));
        }
        let mut off = Noise::Off;
        let noise = if self.config.use_noise { noise } else { &mut off };
        let mut x = phi.shallow_clone();
        let mut img: Option<Tensor> = None;
        for block in &self.blocks {
            x = block.conv0.forward(&x, w, noise)?;
            x = block.conv1.forward(&x, w, noise)?;
            let y = block.torgb.forward(&x, w)?;
            img = Some(match img {
                Some(prev) => upsample_bilinear(&prev) + y,
                None => y,
            });
        }
        Ok(img.expect("at least one synthesis block"))
    }

    pub fn decode(&self, phi: &Tensor, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        let w = self.map_latent(z)?;
        self.synthesize(phi, &w, noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::nn::VarStore;
    use tch::Device;

    #[test]
    fn skip_k_values() {
        assert_eq!(compute_skip_k(4).unwrap(), 0);
        assert_eq!(compute_skip_k(8).unwrap(), 1);
        assert_eq!(compute_skip_k(32).unwrap(), 3);
        assert!(compute_skip_k(2).is_err());
    }

    #[test]
    fn block_count_and_output_shape() {
        let cfg = DecoderConfig {
            output_res: 32,
            phi_res: 4,
            phi_channels: 6,
            latent_dim: 8,
            style_dim: 8,
            mapping_depth: 2,
            channel_base: 64,
            channel_max: 8,
            ..DecoderConfig::default()
        };
        let vs = VarStore::new(Device::Cpu);
        let dec = Decoder::new(&vs.root(), &cfg).unwrap();
        assert_eq!(dec.blocks.len(), 3);
        let phi = Tensor::randn([2, 6, 4, 4], (Kind::Float, Device::Cpu));
        let z = Tensor::randn([2, 8], (Kind::Float, Device::Cpu));
        let img = dec.decode(&phi, &z, &mut Noise::Off).unwrap();
        assert_eq!(img.size(), vec![2, 3, 32, 32]);
        let again = dec.decode(&phi, &z, &mut Noise::Off).unwrap();
        assert!(crate::tensor::bit_equal(&img, &again));
    }

    #[test]
    fn full_scale_block_count() {
        let cfg = DecoderConfig::default();
        assert_eq!(cfg.num_blocks(), 4);
        assert_eq!(cfg.skip_k(), 3);
    }

    #[test]
    fn plain_conv_when_unmodulated() {
        let x = Tensor::randn([2, 3, 5, 5], (Kind::Double, Device::Cpu));
        let w = Tensor::randn([4, 3, 3, 3], (Kind::Double, Device::Cpu));
        let s = Tensor::ones([2, 3], (Kind::Double, Device::Cpu));
        let a = modulated_conv(&x, &s, &w, false).unwrap();
        let b = x.conv2d(&w, None::<Tensor>, [1, 1], [1, 1], [1, 1], 1);
        assert!(f64::try_from((a - b).abs().max()).unwrap() < 1e-12);
    }

    #[test]
    fn demodulation_cancels_style_scale() {
        let x = Tensor::randn([1, 3, 5, 5], (Kind::Double, Device::Cpu));
        let w = Tensor::randn([4, 3, 3, 3], (Kind::Double, Device::Cpu));
        let s = Tensor::rand([1, 3], (Kind::Double, Device::Cpu)) + 0.5;
        let a = modulated_conv(&x, &s, &w, true).unwrap();
        let b = modulated_conv(&x, &(&s * 7.5), &w, true).unwrap();
        assert!(f64::try_from((a - b).abs().max()).unwrap() < 1e-6);
    }

    #[test]
    fn one_by_one_closed_form() {
        // y = x * w * s / sqrt((w * s)^2 + 1e-8)
        let (xv, wv, sv) = (0.7f64, -1.3f64, 0.4f64);
        let x = Tensor::from_slice(&[xv]).reshape([1, 1, 1, 1]);
        let w = Tensor::from_slice(&[wv]).reshape([1, 1, 1, 1]);
        let s = Tensor::from_slice(&[sv]).reshape([1, 1]);
        let y = f64::try_from(modulated_conv(&x, &s, &w, true).unwrap().flatten(0, -1).get(0)).unwrap();
        let expect = xv * wv * sv / ((wv * sv).powi(2) + 1e-8).sqrt();
        assert!((y - expect).abs() < 1e-12);
    }

    #[test]
    fn mapping_is_scale_invariant_in_z() {
        let cfg = DecoderConfig {
            output_res: 8,
            phi_res: 4,
            phi_channels: 2,
            latent_dim: 5,
            style_dim: 5,
            mapping_depth: 0,
            channel_base: 16,
            channel_max: 4,
            ..DecoderConfig::default()
        };
        let mut vs = VarStore::new(Device::Cpu);
        let dec = Decoder::new(&vs.root(), &cfg).unwrap();
        vs.double();
        let z = Tensor::randn([1, 5], (Kind::Double, Device::Cpu));
        let a = dec.map_latent(&z).unwrap();
        let b = dec.map_latent(&(&z * 3.0)).unwrap();
        assert!(f64::try_from((a - b).abs().max()).unwrap() < 1e-7);
    }
}
