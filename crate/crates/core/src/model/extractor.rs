//! Frozen feature extractors for the perceptual loss.

use crate::error::{Error, Result};
use crate::tensor::randn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use tch::{Kind, Tensor};

/// A fixed network exposing activations at a declared list of layers.
pub trait FeatureExtractor {
    /// Activations of the declared layers for a `[B, 3, H, W]` batch in `[-1, 1]`.
    fn features(&self, images: &Tensor) -> Vec<Tensor>;

    fn num_layers(&self) -> usize;
}

/// Single layer that returns its input; reduces the perceptual loss to a
/// mean absolute pixel difference.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, images: &Tensor) -> Vec<Tensor> {
        vec![images.shallow_clone()]
    }

    fn num_layers(&self) -> usize {
        1
    }
}

/// Small conv/ReLU/avg-pool stack. The default weights are drawn from a
/// fixed seed (He-normal); pretrained weights of the same layout can be
/// loaded from a safetensors file with tensors `conv{i}.weight` / `conv{i}.bias`.
#[derive(Debug)]
pub struct ConvExtractor {
    convs: Vec<(Tensor, Tensor)>,
    include_input: bool,
}

pub const DEFAULT_EXTRACTOR_CHANNELS: [i64; 3] = [16, 32, 32];
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl ConvExtractor {
    pub fn random(seed: u64, channels: &[i64], include_input: bool, kind: Kind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let convs = channels
            .iter()
            .map(|&out| {
                let std = (2.0 / (in_ch * 9) as f64).sqrt();
                let w = randn(&mut rng, &[out, in_ch, 3, 3], kind) * std;
                let b = Tensor::zeros([out], (kind, tch::Device::Cpu));
                in_ch = out;
                (w, b)
            })
            .collect();
        Self { convs, include_input }
    }

    /// The default extractor: seeded weights, pixel layer included.
    pub fn default_for(kind: Kind) -> Self {
        Self::random(DEFAULT_EXTRACTOR_SEED, &DEFAULT_EXTRACTOR_CHANNELS, true, kind)
    }

    pub fn load(path: &Path, include_input: bool, kind: Kind) -> Result<Self> {
        let named = Tensor::read_safetensors(path)?;
        let find = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.to_kind(kind).detach())
                .ok_or_else(|| Error::Format { path: path.to_path_buf(), reason: format!("missing tensor {name}") })
        };
        let mut convs = Vec::new();
        let mut in_ch = 3;
        while named.iter().any(|(n, _)| n == &format!("conv{}.weight", convs.len())) {
            let i = convs.len();
            let w = find(&format!("conv{i}.weight"))?;
            let b = find(&format!("conv{i}.bias"))?;
            let s = w.size();
            if s.len() != 4 || s[1] != in_ch || b.size() != [s[0]] {
                return Err(Error::Format { path: path.to_path_buf(), reason: format!("conv{i} has shape {s:?}") });
            }
            in_ch = s[0];
            convs.push((w, b));
        }
        if convs.is_empty() {
            return Err(Error::Format { path: path.to_path_buf(), reason: "no conv layers".into() });
        }
        Ok(Self { convs, include_input })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, Tensor)> = self
            .convs
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("conv{i}.weight"), w.shallow_clone()), (format!("conv{i}.bias"), b.shallow_clone())])
            .collect();
        Tensor::write_safetensors(&named, path)?;
        Ok(())
    }
}

impl FeatureExtractor for ConvExtractor {
    fn features(&self, images: &Tensor) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.num_layers());
        if self.include_input {
            out.push(images.shallow_clone());
        }
        let mut x = images.shallow_clone();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>);
            }
            x = x.conv2d(w, Some(b), [1, 1], [1, 1], [1, 1], 1).relu();
            out.push(x.shallow_clone());
        }
        out
    }

    fn num_layers(&self) -> usize {
        self.convs.len() + self.include_input as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    #[test]
    fn default_extractor_is_deterministic() {
        let a = ConvExtractor::default_for(Kind::Float);
        let b = ConvExtractor::default_for(Kind::Float);
        let x = Tensor::randn([1, 3, 16, 16], (Kind::Float, Device::Cpu));
        for (fa, fb) in a.features(&x).iter().zip(b.features(&x)) {
            assert!(crate::tensor::bit_equal(fa, &fb));
        }
        assert_eq!(a.num_layers(), 4);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ext.safetensors");
        let a = ConvExtractor::random(3, &[4, 5], false, Kind::Float);
        a.save(&p).unwrap();
        let b = ConvExtractor::load(&p, false, Kind::Float).unwrap();
        let x = Tensor::randn([2, 3, 8, 8], (Kind::Float, Device::Cpu));
        for (fa, fb) in a.features(&x).iter().zip(b.features(&x)) {
            assert!(crate::tensor::bit_equal(fa, &fb));
        }
    }
}
