//! Conditioning encoder: 1x1 stem, residual downsampling backbone, a
//! fully-connected latent head on the terminal 4x4 feature, and a top-down
//! feature pyramid producing the spatial feature at 1/16 input resolution.

use super::layers::{is_pow2, log2, upsample_nearest, EqConv2d, EqLinear, ResBlockDown};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use tch::nn::Path;
use tch::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: i64,
    pub input_height: i64,
    pub input_width: i64,
    pub stem_channels: i64,
    /// Cap on the doubling channel schedule.
    pub max_channels: i64,
    /// Requested number of top-down merge levels; clamped to the levels
    /// available between the 1/16 feature and the 4x4 terminal.
    pub pyramid_levels: usize,
    pub phi_channels: i64,
    pub latent_dim: i64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 152,
            input_height: 512,
            input_width: 512,
            stem_channels: 64,
            max_channels: 512,
            pyramid_levels: 3,
            phi_channels: 512,
            latent_dim: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.input_height, self.input_width);
        if !is_pow2(h) || !is_pow2(w) || h.min(w) < 64 {
            return Err(Error::Config(format!("encoder input {h}x{w} must be powers of two with short side >= 64")));
        }
        if self.in_channels < 1 || self.stem_channels < 1 || self.phi_channels < 1 || self.latent_dim < 1 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of downsampling stages: the short side goes down to 4.
    pub fn num_stages(&self) -> usize {
        log2(self.input_height.min(self.input_width) / 4) as usize
    }

    pub fn stage_channels(&self, stage: usize) -> i64 {
        (self.stem_channels << (stage + 1).min(30)).min(self.max_channels)
    }

    /// Pyramid levels actually built.
    pub fn effective_pyramid_levels(&self) -> usize {
        // Stage 3 outputs the 1/16 feature; the last stage outputs 4x4.
        self.pyramid_levels.min(self.num_stages() - 3)
    }

    pub fn phi_dims(&self) -> (i64, i64) {
        (self.input_height / 16, self.input_width / 16)
    }

    pub fn terminal_dims(&self) -> (i64, i64) {
        let f = 1i64 << self.num_stages();
        (self.input_height / f, self.input_width / f)
    }
}

/// Encoder result: spatial feature, latent statistics and the sampled code.
#[derive(Debug)]
pub struct EncoderOutput {
    pub phi_prime: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.size() != logvar.size() || mu.size() != eps.size() {
        return Err(Error::Shape(format!("mu {:?}, logvar {:?}, eps {:?}", mu.size(), logvar.size(), eps.size())));
    }
    Ok(mu + (logvar * 0.5).exp() * eps)
}

#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    pub stem: EqConv2d,
    pub blocks: Vec<ResBlockDown>,
    pub mu_head: EqLinear,
    pub logvar_head: EqLinear,
    pub top_proj: EqConv2d,
    pub laterals: Vec<EqConv2d>,
    pub merges: Vec<EqConv2d>,
    pub out_conv: EqConv2d,
}

impl Encoder {
    pub fn new(p: &Path, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let stem = EqConv2d::new(&(p / "stem"), config.in_channels, config.stem_channels, 1, true, false);
        let mut blocks = Vec::new();
        let mut ch = config.stem_channels;
        for i in 0..config.num_stages() {
            let out = config.stage_channels(i);
            blocks.push(ResBlockDown::new(&(p / "blocks" / i), ch, out));
            ch = out;
        }
        let (th, tw) = config.terminal_dims();
        let flat = ch * th * tw;
        let mu_head = EqLinear::new(&(p / "mu"), flat, config.latent_dim, Some(0.0), 1.0, false);
        let logvar_head = EqLinear::new(&(p / "logvar"), flat, config.latent_dim, Some(0.0), 1.0, false);

        let levels = config.effective_pyramid_levels();
        let level_stage = |k: usize| 3 + k; // k = 0 is the 1/16 level
        let coarsest = level_stage(levels - 1);
        let top_proj = EqConv2d::new(&(p / "top_proj"), config.stage_channels(coarsest), config.phi_channels, 1, true, false);
        let mut laterals = Vec::new();
        let mut merges = Vec::new();
        // Finer levels, ordered coarse -> fine.
        for (j, k) in (0..levels - 1).rev().enumerate() {
            let lc = config.stage_channels(level_stage(k));
            laterals.push(EqConv2d::new(&(p / "lateral" / j), lc, config.phi_channels, 1, true, false));
            merges.push(EqConv2d::new(&(p / "merge" / j), config.phi_channels, config.phi_channels, 3, true, true));
        }
        let out_conv = EqConv2d::new(&(p / "out"), config.phi_channels, config.phi_channels, 3, true, false);
        Ok(Self { config: config.clone(), stem, blocks, mu_head, logvar_head, top_proj, laterals, merges, out_conv })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// 1x1 projection to `stem_channels`.
    pub fn stem(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.size();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::Shape(format!("encoder expects {} input channels, got shape {s:?}", self.config.in_channels)));
        }
        Ok(self.stem.forward(input))
    }

    /// Outputs of every downsampling stage, fine to coarse.
    pub fn bottom_up(&self, stem: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut x = stem.shallow_clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
            feats.push(x.shallow_clone());
        }
        Ok(feats)
    }

    /// Flatten the terminal feature and project to `(mu, logvar)`.
    pub fn latent_head(&self, terminal: &Tensor) -> Result<(Tensor, Tensor)> {
        let (th, tw) = self.config.terminal_dims();
        let s = terminal.size();
        if s.len() != 4 || s[2] != th || s[3] != tw {
            return Err(Error::Shape(format!("latent head expects {th}x{tw} feature, got {s:?}")));
        }
        let flat = terminal.flatten(1, -1);
        Ok((self.mu_head.forward(&flat), self.logvar_head.forward(&flat)))
    }

    /// Top-down merge over pyramid levels ordered coarse -> fine.
    pub fn pyramid_merge(&self, levels: &[Tensor]) -> Result<Tensor> {
        if levels.len() != self.laterals.len() + 1 {
            return Err(Error::Shape(format!("expected {} pyramid levels, got {}", self.laterals.len() + 1, levels.len())));
        }
        let mut top = self.top_proj.forward(&levels[0]);
        for ((level, lateral), merge) in levels[1..].iter().zip(&self.laterals).zip(&self.merges) {
            let up = upsample_nearest(&top);
            if up.size()[2..] != level.size()[2..] {
                return Err(Error::Shape(format!("pyramid level {:?} does not match upsampled {:?}", level.size(), up.size())));
            }
            top = merge.forward(&(up + lateral.forward(level)));
        }
        Ok(self.out_conv.forward(&top))
    }

    /// The pyramid inputs, coarse -> fine, picked from the bottom-up outputs.
    pub fn pyramid_inputs<'a>(&self, feats: &'a [Tensor]) -> Vec<&'a Tensor> {
        let n = self.config.effective_pyramid_levels();
        (0..n).rev().map(|k| &feats[3 + k]).collect()
    }

    pub fn encode(&self, input: &Tensor, eps: &Tensor) -> Result<EncoderOutput> {
        let stem = self.stem(input)?;
        let feats = self.bottom_up(&stem)?;
        let terminal = feats.last().expect("at least four stages");
        let (mu, logvar) = self.latent_head(terminal)?;
        let levels: Vec<Tensor> = self.pyramid_inputs(&feats).into_iter().map(|t| t.shallow_clone()).collect();
        let phi_prime = self.pyramid_merge(&levels)?;
        let z = reparameterize(&mu, &logvar, eps)?;
        Ok(EncoderOutput { phi_prime, mu, logvar, z })
    }
}
