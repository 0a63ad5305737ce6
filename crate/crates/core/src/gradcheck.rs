//! Finite-difference gradient checks at float64 on toy shapes.
//!
//! Every check compares the autograd gradient of a scalar function with
//! central differences on a seeded sample of input elements. Non-scalar
//! outputs are reduced by a fixed random projection.

use crate::error::{Error, Result};
use crate::losses::{d_adv_loss, g_adv_loss, kl_loss, path_length_penalty, perceptual_loss, r1_penalty};
use crate::model::cropper::crop_instance_region;
use crate::model::decoder::{modulated_conv, Decoder, DecoderConfig, Noise};
use crate::model::discriminator::{Discriminator, DiscriminatorConfig};
use crate::model::encoder::{Encoder, EncoderConfig};
use crate::model::extractor::ConvExtractor;
use crate::model::layers::ResBlockDown;
use crate::tensor::randn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;
use tch::nn::VarStore;
use tch::{Device, Kind, Tensor};

pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Elements probed per input tensor.
const PROBES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Encoder,
    Decoder,
    Discriminator,
    Losses,
    Cropper,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Encoder, Suite::Decoder, Suite::Discriminator, Suite::Losses, Suite::Cropper];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Encoder => "encoder",
            Suite::Decoder => "decoder",
            Suite::Discriminator => "discriminator",
            Suite::Losses => "losses",
            Suite::Cropper => "cropper",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck module {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub suite: String,
    pub op: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[i64]) -> Tensor {
    randn(rng, shape, Kind::Double).set_requires_grad(true)
}

/// Compare autograd and central differences for scalar `f` at `inputs`.
/// Inputs must be leaves with gradient tracking (model parameters work,
/// they are perturbed in place and restored).
pub fn check<F>(suite: Suite, op: &str, inputs: &[Tensor], f: F) -> Result<CheckResult>
where
    F: Fn() -> Result<Tensor>,
{
    let y = f()?;
    if y.numel() != 1 {
        return Err(Error::Shape(format!("{op}: gradcheck needs a scalar, got {:?}", y.size())));
    }
    let grads = Tensor::f_run_backward(&[&y], inputs, false, false).map_err(|e| Error::GradientUnavailable(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (x, g) in inputs.iter().zip(&grads) {
        let g = if g.defined() { g.shallow_clone() } else { x.zeros_like() };
        let n = x.numel();
        let flat_g = g.flatten(0, -1);
        let mut flat_x = x.detach().flatten(0, -1);
        for i in sample(&mut rng, n, PROBES.min(n)) {
            let i = i as i64;
            let orig = flat_x.double_value(&[i]);
            let eval = |v: f64, flat_x: &mut Tensor| -> Result<f64> {
                tch::no_grad(|| {
                    let _ = flat_x.get(i).fill_(v);
                });
                Ok(f()?.double_value(&[]))
            };
            let plus = eval(orig + STEP, &mut flat_x)?;
            let minus = eval(orig - STEP, &mut flat_x)?;
            eval(orig, &mut flat_x)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(flat_g.double_value(&[i]), numeric));
            probes += 1;
        }
    }
    Ok(CheckResult { suite: suite.name().into(), op: op.into(), max_rel_error: worst, probes })
}

/// Scalar `<t, proj>` with a fixed projection drawn from `seed`.
fn project(t: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = randn(&mut rng, &t.size(), Kind::Double);
    (t * p).sum(Kind::Double)
}

fn double_store() -> VarStore {
    tch::manual_seed(7);
    VarStore::new(Device::Cpu)
}

fn encoder_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut vs = double_store();
    let cfg = EncoderConfig {
        in_channels: 3,
        input_height: 64,
        input_width: 64,
        stem_channels: 2,
        max_channels: 4,
        pyramid_levels: 3,
        phi_channels: 3,
        latent_dim: 4,
    };
    let enc = Encoder::new(&(vs.root() / "enc"), &cfg)?;
    let block = ResBlockDown::new(&(vs.root() / "block"), 3, 4);
    vs.double();

    let mut out = Vec::new();
    let x8 = leaf(&mut rng, &[2, 3, 8, 8]);
    out.push(check(s, "stem", &[x8.shallow_clone(), enc.stem.weight.shallow_clone()], || Ok(project(&enc.stem(&x8)?, 11)))?);
    out.push(check(s, "resblock_down", &[x8.shallow_clone(), block.conv0.weight.shallow_clone()], || {
        Ok(project(&block.forward(&x8)?, 12))
    })?);
    let t = leaf(&mut rng, &[2, 4, 4, 4]);
    out.push(check(s, "latent_head", &[t.shallow_clone(), enc.mu_head.weight.shallow_clone()], || {
        let (mu, logvar) = enc.latent_head(&t)?;
        Ok(project(&mu, 13) + project(&logvar, 14))
    })?);
    let coarse = leaf(&mut rng, &[1, 4, 4, 4]);
    out.push(check(s, "pyramid_merge", &[coarse.shallow_clone(), enc.top_proj.weight.shallow_clone()], || {
        Ok(project(&enc.pyramid_merge(&[coarse.shallow_clone()])?, 15))
    })?);
    let x = leaf(&mut rng, &[2, 3, 64, 64]);
    let eps = leaf(&mut rng, &[2, 4]);
    out.push(check(s, "encode", &[x.shallow_clone(), eps.shallow_clone()], || {
        let o = enc.encode(&x, &eps)?;
        Ok(project(&o.phi_prime, 16) + project(&o.z, 17) + project(&o.logvar, 18))
    })?);
    Ok(out)
}

fn decoder_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Decoder;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut vs = double_store();
    let cfg = DecoderConfig {
        output_res: 8,
        phi_res: 4,
        phi_channels: 3,
        latent_dim: 4,
        style_dim: 4,
        mapping_depth: 2,
        mapping_lr_mul: 0.01,
        channel_base: 16,
        channel_max: 4,
        use_noise: false,
    };
    let dec = Decoder::new(&vs.root(), &cfg)?;
    vs.double();

    let mut out = Vec::new();
    let x = leaf(&mut rng, &[2, 3, 5, 5]);
    let st = leaf(&mut rng, &[2, 3]);
    let w = leaf(&mut rng, &[4, 3, 3, 3]);
    for demod in [true, false] {
        let name = if demod { "modulated_conv" } else { "modulated_conv_nodemod" };
        out.push(check(s, name, &[x.shallow_clone(), st.shallow_clone(), w.shallow_clone()], || {
            Ok(project(&modulated_conv(&x, &st, &w, demod)?, 21))
        })?);
    }
    let z = leaf(&mut rng, &[2, 4]);
    out.push(check(s, "map_latent", &[z.shallow_clone(), dec.mapping[0].weight.shallow_clone()], || {
        Ok(project(&dec.map_latent(&z)?, 22))
    })?);
    let phi = leaf(&mut rng, &[2, 3, 4, 4]);
    out.push(check(s, "decode", &[phi.shallow_clone(), z.shallow_clone(), dec.blocks[0].conv0.weight.shallow_clone()], || {
        Ok(project(&dec.decode(&phi, &z, &mut Noise::Off)?, 23))
    })?);
    Ok(out)
}

fn discriminator_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Discriminator;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut vs = double_store();
    let cfg = DiscriminatorConfig { input_res: 8, channel_base: 16, channel_max: 4, mbstd: true, mbstd_group: 2 };
    let d = Discriminator::new(&vs.root(), &cfg)?;
    vs.double();
    let x = leaf(&mut rng, &[4, 3, 8, 8]);
    Ok(vec![check(s, "discriminate", &[x.shallow_clone(), d.conv.weight.shallow_clone()], || {
        Ok(project(&d.discriminate(&x)?, 31))
    })?])
}

fn losses_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Losses;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut out = Vec::new();
    let real = leaf(&mut rng, &[6]);
    let fake = leaf(&mut rng, &[6]);
    out.push(check(s, "g_adv_loss", &[fake.shallow_clone()], || Ok(g_adv_loss(&fake)))?);
    out.push(check(s, "d_adv_loss", &[real.shallow_clone(), fake.shallow_clone()], || Ok(d_adv_loss(&real, &fake)))?);

    let mu = leaf(&mut rng, &[3, 16]);
    let logvar = leaf(&mut rng, &[3, 16]);
    out.push(check(s, "kl_loss", &[mu.shallow_clone(), logvar.shallow_clone()], || kl_loss(&mu, &logvar))?);

    let gen = leaf(&mut rng, &[2, 3, 8, 8]);
    let tgt = randn(&mut rng, &[2, 3, 8, 8], Kind::Double);
    let ext = ConvExtractor::random(5, &[4, 4], true, Kind::Double);
    out.push(check(s, "perceptual_loss", &[gen.shallow_clone()], || perceptual_loss(&gen, &tgt, &ext))?);

    // R1 through a small discriminator: second-order gradients w.r.t. weights.
    let mut vs = double_store();
    let cfg = DiscriminatorConfig { input_res: 8, channel_base: 16, channel_max: 4, mbstd: false, mbstd_group: 1 };
    let d = Discriminator::new(&vs.root(), &cfg)?;
    vs.double();
    let imgs = randn(&mut rng, &[2, 3, 8, 8], Kind::Double);
    out.push(check(s, "r1_penalty", &[d.conv.weight.shallow_clone(), d.from_rgb.weight.shallow_clone()], || {
        r1_penalty(&imgs, |x| d.discriminate(x), 10.0)
    })?);

    // Path length through a smooth toy generator G(w) = tanh(w A) on a 2x4 image.
    let a = randn(&mut rng, &[5, 3 * 2 * 4], Kind::Double);
    let w = leaf(&mut rng, &[3, 5]);
    let y = randn(&mut rng, &[3, 3, 2, 4], Kind::Double) / 8f64.sqrt();
    out.push(check(s, "path_length_penalty", &[w.shallow_clone()], || {
        let img = w.matmul(&a).tanh().reshape([3, 3, 2, 4]);
        // decay 1 freezes the running target, which the penalty treats as a constant.
        Ok(path_length_penalty(&w, &img, &y, 0.5, 2.0, 1.0)?.0)
    })?);
    Ok(out)
}

fn cropper_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phi = leaf(&mut rng, &[1, 2, 8, 8]);
    Ok(vec![check(Suite::Cropper, "crop_instance_region", &[phi.shallow_clone()], || {
        Ok(project(&crop_instance_region(&phi)?, 41))
    })?])
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Encoder => encoder_suite(),
        Suite::Decoder => decoder_suite(),
        Suite::Discriminator => discriminator_suite(),
        Suite::Losses => losses_suite(),
        Suite::Cropper => cropper_suite(),
    }
}

pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(run_suite(s)?);
    }
    Ok(out)
}
