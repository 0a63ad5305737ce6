//! Encoder + feature cropper + skip-K decoder, for both the base model and
//! the class-specific models.

use super::cropper::{self, CropMode};
use super::decoder::{Decoder, DecoderConfig, Noise};
use super::encoder::{reparameterize, Encoder, EncoderConfig};
use super::layers::is_pow2;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use tch::nn::Path;
use tch::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorRole {
    Base,
    Class,
}

/// Width/depth knobs shared by every generator of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub stem_channels: i64,
    pub encoder_max_channels: i64,
    pub pyramid_levels: usize,
    pub phi_channels: i64,
    pub latent_dim: i64,
    pub style_dim: i64,
    pub mapping_depth: usize,
    pub mapping_lr_mul: f64,
    pub channel_base: i64,
    pub channel_max: i64,
    pub use_noise: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            stem_channels: 64,
            encoder_max_channels: 512,
            pyramid_levels: 3,
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

impl ArchConfig {
    /// Narrow networks for CPU-scale runs on 64-128 px canvases.
    pub fn desk() -> Self {
        Self {
            stem_channels: 16,
            encoder_max_channels: 64,
            pyramid_levels: 3,
            phi_channels: 64,
            latent_dim: 64,
            style_dim: 64,
            mapping_depth: 2,
            mapping_lr_mul: 0.01,
            channel_base: 1024,
            channel_max: 64,
            use_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub role: GeneratorRole,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl GeneratorConfig {
    /// Base model on an `height x width` canvas (`width` = `height` or `2 * height`);
    /// input is the one-hot semantic map plus the edge channel.
    pub fn base(num_classes: usize, height: i64, width: i64, arch: &ArchConfig) -> Result<Self> {
        if width != height && width != 2 * height {
            return Err(Error::Config(format!("base canvas {height}x{width} must be square or 1:2")));
        }
        let encoder = Self::encoder_config(num_classes as i64 + 1, height, width, arch);
        let decoder = Self::decoder_config(height, height / 16, arch);
        let cfg = Self { role: GeneratorRole::Base, encoder, decoder };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Class model rendering `model_res` instances from a `2 * model_res`
    /// context (`3` image channels plus the one-hot semantic crop).
    pub fn class(num_classes: usize, model_res: i64, arch: &ArchConfig) -> Result<Self> {
        if !is_pow2(model_res) || model_res < 64 {
            return Err(Error::Config(format!("class model_res {model_res} must be a power of two >= 64")));
        }
        let ctx = 2 * model_res;
        let encoder = Self::encoder_config(3 + num_classes as i64, ctx, ctx, arch);
        let decoder = Self::decoder_config(model_res, model_res / 16, arch);
        let cfg = Self { role: GeneratorRole::Class, encoder, decoder };
        cfg.validate()?;
        Ok(cfg)
    }

    fn encoder_config(in_channels: i64, h: i64, w: i64, arch: &ArchConfig) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            input_height: h,
            input_width: w,
            stem_channels: arch.stem_channels,
            max_channels: arch.encoder_max_channels,
            pyramid_levels: arch.pyramid_levels,
            phi_channels: arch.phi_channels,
            latent_dim: arch.latent_dim,
        }
    }

    fn decoder_config(output_res: i64, phi_res: i64, arch: &ArchConfig) -> DecoderConfig {
        DecoderConfig {
            output_res,
            phi_res,
            phi_channels: arch.phi_channels,
            latent_dim: arch.latent_dim,
            style_dim: arch.style_dim,
            mapping_depth: arch.mapping_depth,
            mapping_lr_mul: arch.mapping_lr_mul,
            channel_base: arch.channel_base,
            channel_max: arch.channel_max,
            use_noise: arch.use_noise,
        }
    }

    pub fn crop_mode(&self) -> CropMode {
        match self.role {
            GeneratorRole::Base => CropMode::Identity,
            GeneratorRole::Class => CropMode::CentralHalf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let (ph, pw) = self.encoder.phi_dims();
        let (ph, pw) = match self.crop_mode() {
            CropMode::Identity => (ph, pw),
            CropMode::CentralHalf => (ph / 2, pw / 2),
        };
        if ph.min(pw) != self.decoder.phi_res || self.encoder.phi_channels != self.decoder.phi_channels {
            return Err(Error::Config(format!(
                "encoder feature {ph}x{pw}x{} does not feed decoder phi_res {} x {}",
                self.encoder.phi_channels, self.decoder.phi_res, self.decoder.phi_channels
            )));
        }
        if self.encoder.latent_dim != self.decoder.latent_dim {
            return Err(Error::Config("encoder and decoder latent_dim differ".into()));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> (i64, i64, i64) {
        (self.encoder.in_channels, self.encoder.input_height, self.encoder.input_width)
    }

    /// Output image height and width.
    pub fn output_dims(&self) -> (i64, i64) {
        match self.role {
            GeneratorRole::Base => (self.encoder.input_height, self.encoder.input_width),
            GeneratorRole::Class => (self.decoder.output_res, self.decoder.output_res),
        }
    }
}

/// Everything a forward pass produces. `image` is in `[-1, 1]` nominal range.
#[derive(Debug)]
pub struct GenOutput {
    pub image: Tensor,
    pub phi: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
    pub w: Tensor,
}

#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Generator {
    pub fn new(p: &Path, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(&(p / "encoder"), &config.encoder)?,
            decoder: Decoder::new(&(p / "decoder"), &config.decoder)?,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Encode the conditioning input, sample `z = mu + sigma * eps`, crop and
    /// decode.
    pub fn forward(&self, input: &Tensor, eps: &Tensor, noise: &mut Noise) -> Result<GenOutput> {
        let enc = self.encoder.encode(input, eps)?;
        let phi = cropper::apply(self.config.crop_mode(), &enc.phi_prime)?;
        let w = self.decoder.map_latent(&enc.z)?;
        let image = self.decoder.synthesize(&phi, &w, noise)?;
        Ok(GenOutput { image, phi, mu: enc.mu, logvar: enc.logvar, z: enc.z, w })
    }

    /// Decode with an externally supplied latent instead of the encoder's
    /// sample; the spatial feature still comes from `input`.
    pub fn forward_with_z(&self, input: &Tensor, z: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        let stem = self.encoder.stem(input)?;
        let feats = self.encoder.bottom_up(&stem)?;
        let levels: Vec<Tensor> = self.encoder.pyramid_inputs(&feats).into_iter().map(|t| t.shallow_clone()).collect();
        let phi = cropper::apply(self.config.crop_mode(), &self.encoder.pyramid_merge(&levels)?)?;
        self.decoder.decode(&phi, z, noise)
    }

    /// `z` for a given `eps` using the encoder's posterior.
    pub fn posterior_sample(&self, input: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let stem = self.encoder.stem(input)?;
        let feats = self.encoder.bottom_up(&stem)?;
        let (mu, logvar) = self.encoder.latent_head(feats.last().expect("encoder has stages"))?;
        reparameterize(&mu, &logvar, eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::nn::VarStore;
    use tch::{Device, Kind};

    fn tiny() -> ArchConfig {
        ArchConfig {
            stem_channels: 4,
            encoder_max_channels: 8,
            phi_channels: 8,
            latent_dim: 8,
            style_dim: 8,
            mapping_depth: 1,
            channel_base: 64,
            channel_max: 8,
            ..ArchConfig::desk()
        }
    }

    #[test]
    fn base_and_class_shapes() {
        let vs = VarStore::new(Device::Cpu);
        let cfg = GeneratorConfig::base(4, 64, 128, &tiny()).unwrap();
        let g = Generator::new(&vs.root(), &cfg).unwrap();
        let x = Tensor::randn([2, 5, 64, 128], (Kind::Float, Device::Cpu));
        let eps = Tensor::zeros([2, 8], (Kind::Float, Device::Cpu));
        let out = g.forward(&x, &eps, &mut Noise::Off).unwrap();
        assert_eq!(out.image.size(), vec![2, 3, 64, 128]);

        let vs = VarStore::new(Device::Cpu);
        let cfg = GeneratorConfig::class(4, 64, &tiny()).unwrap();
        assert_eq!(cfg.input_dims(), (7, 128, 128));
        let g = Generator::new(&vs.root(), &cfg).unwrap();
        let x = Tensor::randn([1, 7, 128, 128], (Kind::Float, Device::Cpu));
        let eps = Tensor::zeros([1, 8], (Kind::Float, Device::Cpu));
        let out = g.forward(&x, &eps, &mut Noise::Off).unwrap();
        assert_eq!(out.phi.size(), vec![1, 8, 4, 4]);
        assert_eq!(out.image.size(), vec![1, 3, 64, 64]);
    }

    #[test]
    fn class_resolution_must_allow_a_feature() {
        assert!(GeneratorConfig::class(4, 32, &tiny()).is_err());
        assert!(GeneratorConfig::base(4, 64, 96, &tiny()).is_err());
    }
}
