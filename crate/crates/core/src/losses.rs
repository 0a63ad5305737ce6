//! Adversarial, regularisation, KL and perceptual loss terms, the loss
//! weights and their lazy cadences, and the non-square split used to feed
//! the square discriminator.

use crate::error::{Error, Result};
use crate::model::extractor::FeatureExtractor;
use crate::tensor::randn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_perceptual: f64,
    pub pathlen_weight: f64,
    pub r1_weight: f64,
    pub r1_every: u64,
    pub pathlen_every: u64,
    pub perceptual_every: u64,
    /// Multiply the perceptual term by its cadence, like the lazy regularisers.
    pub compensate_perceptual: bool,
    pub pathlen_decay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: 0.01,
            lambda_perceptual: 1.0,
            pathlen_weight: 2.0,
            r1_weight: 10.0,
            r1_every: 16,
            pathlen_every: 4,
            perceptual_every: 4,
            compensate_perceptual: true,
            pathlen_decay: 0.99,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_kl, self.lambda_perceptual, self.pathlen_weight, self.r1_weight];
        if w.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if self.r1_every == 0 || self.pathlen_every == 0 || self.perceptual_every == 0 {
            return Err(Error::Config("loss cadences must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.pathlen_decay) {
            return Err(Error::Config("pathlen_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn r1_due(&self, iteration: u64) -> bool {
        iteration % self.r1_every == 0
    }

    pub fn pathlen_due(&self, iteration: u64) -> bool {
        iteration % self.pathlen_every == 0
    }

    pub fn perceptual_due(&self, iteration: u64) -> bool {
        iteration % self.perceptual_every == 0
    }

    fn perceptual_scale(&self) -> f64 {
        if self.compensate_perceptual {
            self.perceptual_every as f64
        } else {
            1.0
        }
    }
}

/// Split a `[B, C, H, 2H]` batch into `[2B, C, H, H]`: all left halves, then
/// all right halves.
pub fn split_nonsquare(images: &Tensor) -> Result<Tensor> {
    let s = images.size();
    if s.len() != 4 || s[3] != 2 * s[2] {
        return Err(Error::Shape(format!("split_nonsquare needs width = 2 * height, got {s:?}")));
    }
    let h = s[2];
    Ok(Tensor::cat(&[images.narrow(3, 0, h), images.narrow(3, h, h)], 0))
}

/// Inverse of [`split_nonsquare`].
pub fn merge_halves(halves: &Tensor) -> Result<Tensor> {
    let s = halves.size();
    if s.len() != 4 || s[0] % 2 != 0 {
        return Err(Error::Shape(format!("merge_halves needs an even batch, got {s:?}")));
    }
    let b = s[0] / 2;
    Ok(Tensor::cat(&[halves.narrow(0, 0, b), halves.narrow(0, b, b)], 3))
}

/// Non-saturating generator loss: `mean(softplus(-fake))`.
pub fn g_adv_loss(fake_scores: &Tensor) -> Tensor {
    (-fake_scores).softplus().mean(None::<Kind>)
}

/// Logistic discriminator loss: `mean(softplus(-real)) + mean(softplus(fake))`.
pub fn d_adv_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Tensor {
    (-real_scores).softplus().mean(None::<Kind>) + fake_scores.softplus().mean(None::<Kind>)
}

/// `(weight / 2) * E[|grad_x D(x)|^2]` over the real batch. The returned
/// tensor stays differentiable with respect to the discriminator parameters.
pub fn r1_penalty<F>(real_images: &Tensor, discriminator: F, weight: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = real_images.detach().set_requires_grad(true);
    // The input gradient is needed even when called under no_grad.
    let scores = tch::with_grad(|| discriminator(&x))?;
    let grads = Tensor::f_run_backward(&[scores.sum(None::<Kind>)], &[&x], true, true)
        .map_err(|e| Error::GradientUnavailable(e.to_string()))?;
    let g = grads.into_iter().next().filter(|g| g.defined()).ok_or_else(|| Error::GradientUnavailable("R1 input gradient".into()))?;
    let dims: Vec<i64> = (1..g.dim() as i64).collect();
    let sq = g.square().sum_dim_intlist(dims.as_slice(), false, None::<Kind>);
    Ok(sq.mean(None::<Kind>) * (weight / 2.0))
}

/// Projection direction for the path-length regulariser: standard normal
/// noise scaled by `1 / sqrt(H * W)`.
pub fn path_length_noise(rng: &mut ChaCha8Rng, images: &Tensor) -> Tensor {
    let s = images.size();
    let pixels: i64 = s[2..].iter().product();
    randn(rng, &s, images.kind()) / (pixels as f64).sqrt()
}

/// Path-length penalty.
///
/// `J = grad_w <G(w), y>`; the running target `a` moves toward `mean |J|`
/// with the given decay and the penalty is `weight * mean((|J| - a')^2)`
/// using the updated target `a'`. Returns the penalty and `a'`.
pub fn path_length_penalty(
    w_styles: &Tensor,
    generated: &Tensor,
    projection: &Tensor,
    ema_target: f64,
    weight: f64,
    decay: f64,
) -> Result<(Tensor, f64)> {
    if generated.size() != projection.size() {
        return Err(Error::Shape(format!("images {:?} vs projection {:?}", generated.size(), projection.size())));
    }
    let inner = (generated * projection).sum(None::<Kind>);
    if !inner.requires_grad() {
        return Err(Error::GradientUnavailable("generated images are detached from the styles".into()));
    }
    let grads = Tensor::f_run_backward(&[inner], &[w_styles], true, true)
        .map_err(|e| Error::GradientUnavailable(e.to_string()))?;
    let j = grads.into_iter().next().filter(|g| g.defined()).ok_or_else(|| Error::GradientUnavailable("path-length Jacobian".into()))?;
    let mut norm_sq = j.square().sum_dim_intlist([-1i64].as_slice(), false, None::<Kind>);
    while norm_sq.dim() > 1 {
        norm_sq = norm_sq.mean_dim([-1i64].as_slice(), false, None::<Kind>);
    }
    let lengths = norm_sq.sqrt();
    let mean_len = lengths.detach().mean(None::<Kind>).double_value(&[]);
    let target = ema_target + (1.0 - decay) * (mean_len - ema_target);
    let penalty = (lengths - target).square().mean(None::<Kind>) * weight;
    Ok((penalty, target))
}

/// KL divergence of `N(mu, exp(logvar))` from `N(0, I)`, summed over latent
/// dimensions and averaged over the batch.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    if mu.size() != logvar.size() {
        return Err(Error::Shape(format!("mu {:?} vs logvar {:?}", mu.size(), logvar.size())));
    }
    let term = logvar + 1.0 - mu.square() - logvar.exp();
    Ok((term.sum_dim_intlist([-1i64].as_slice(), false, None::<Kind>) * -0.5).mean(None::<Kind>))
}

/// `sum_l mean |V_l(gen) - V_l(real)|`.
pub fn perceptual_loss(gen: &Tensor, real: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    if gen.size() != real.size() {
        return Err(Error::Shape(format!("generated {:?} vs real {:?}", gen.size(), real.size())));
    }
    let fg = extractor.features(gen);
    let fr = extractor.features(real);
    let mut total = Tensor::zeros([], (gen.kind(), gen.device()));
    for (a, b) in fg.iter().zip(&fr) {
        total = total + (a - b).abs().mean(None::<Kind>);
    }
    Ok(total)
}

/// Which network a loss composition is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRole {
    Generator,
    Discriminator,
}

/// Raw (unweighted) loss values available at one iteration.
#[derive(Debug, Default, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adversarial: f64,
    pub r1: Option<f64>,
    pub path_length: Option<f64>,
    pub kl: Option<f64>,
    pub perceptual: Option<f64>,
}

/// One weighted term of a composed loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    /// Multiplier applied to the raw value (includes lazy compensation).
    pub weight: f64,
    pub value: f64,
}

/// Weighted terms of `L_stylegan + lambda_kl * L_kl + lambda_perc * L_perc`
/// that are active at `iteration`. Regulariser values already carry their own
/// weight (10 for R1, 2 for path length) and are multiplied here only by
/// their cadence.
pub fn compose_loss(parts: &LossParts, weights: &LossWeights, iteration: u64, role: LossRole) -> Vec<LossTerm> {
    let term = |name: &str, weight: f64, value: f64| LossTerm { name: name.to_string(), weight, value };
    let mut terms = vec![term("adversarial", 1.0, parts.adversarial)];
    match role {
        LossRole::Discriminator => {
            if let (true, Some(v)) = (weights.r1_due(iteration), parts.r1) {
                terms.push(term("r1", weights.r1_every as f64, v));
            }
        }
        LossRole::Generator => {
            if let Some(v) = parts.kl {
                terms.push(term("kl", weights.lambda_kl, v));
            }
            if let (true, Some(v)) = (weights.perceptual_due(iteration), parts.perceptual) {
                terms.push(term("perceptual", weights.lambda_perceptual * weights.perceptual_scale(), v));
            }
            if let (true, Some(v)) = (weights.pathlen_due(iteration), parts.path_length) {
                terms.push(term("path_length", weights.pathlen_every as f64, v));
            }
        }
    }
    terms
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights, iteration: u64, role: LossRole) -> f64 {
    compose_loss(parts, weights, iteration, role).iter().map(|t| t.weight * t.value).sum()
}
