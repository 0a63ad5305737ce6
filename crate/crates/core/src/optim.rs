//! Adam with serialisable state, gradient helpers and weight averaging.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::{Kind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.002, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// Adjust for a regulariser that runs every `every` steps:
    /// `c = every / (every + 1)`, `lr * c`, `beta ^ c`.
    pub fn lazy(self, every: u64) -> Self {
        let c = every as f64 / (every as f64 + 1.0);
        Self { lr: self.lr * c, beta1: self.beta1.powf(c), beta2: self.beta2.powf(c), eps: self.eps }
    }
}

/// Trainable variables of a store, sorted by name.
pub fn named_parameters(vs: &VarStore) -> Vec<(String, Tensor)> {
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Gradients of a scalar `loss` with respect to `params`. Parameters the
/// loss does not reach get an undefined tensor.
pub fn gradients(loss: &Tensor, params: &[Tensor]) -> Result<Vec<Tensor>> {
    Tensor::f_run_backward(&[loss], params, false, false).map_err(|e| Error::GradientUnavailable(e.to_string()))
}

#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(vs: &VarStore, config: AdamConfig) -> Self {
        let (names, params): (Vec<_>, Vec<_>) = named_parameters(vs).into_iter().unzip();
        let m = params.iter().map(Tensor::zeros_like).collect();
        let v = params.iter().map(Tensor::zeros_like).collect();
        let steps = vec![0; params.len()];
        Self { config, names, params, m, v, steps }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// One update; parameters with an undefined gradient are left alone,
    /// moments included.
    pub fn step(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), self.params.len())));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        tch::no_grad(|| {
            for i in 0..self.params.len() {
                let g = &grads[i];
                if !g.defined() {
                    continue;
                }
                self.steps[i] += 1;
                let t = self.steps[i] as i32;
                let m = &self.m[i] * beta1 + g * (1.0 - beta1);
                let v = &self.v[i] * beta2 + g.square() * (1.0 - beta2);
                let m_hat = &m / (1.0 - beta1.powi(t));
                let v_hat = &v / (1.0 - beta2.powi(t));
                let update = m_hat / (v_hat.sqrt() + eps) * lr;
                let _ = self.params[i].f_sub_(&update);
                self.m[i].copy_(&m);
                self.v[i].copy_(&v);
            }
        });
        Ok(())
    }

    /// Moments and per-parameter step counts, keyed `m/<name>`, `v/<name>`,
    /// `t/<name>`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(3 * self.names.len());
        for (i, name) in self.names.iter().enumerate() {
            out.push((format!("m/{name}"), self.m[i].shallow_clone()));
            out.push((format!("v/{name}"), self.v[i].shallow_clone()));
            out.push((format!("t/{name}"), Tensor::from_slice(&[self.steps[i] as i64])));
        }
        out
    }

    pub fn load_state(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let find = |key: String| {
            named.iter().find(|(n, _)| *n == key).map(|(_, t)| t).ok_or_else(|| Error::Format {
                path: Default::default(),
                reason: format!("optimizer state lacks {key}"),
            })
        };
        for (i, name) in self.names.iter().enumerate() {
            let m = find(format!("m/{name}"))?;
            let v = find(format!("v/{name}"))?;
            if m.size() != self.m[i].size() || v.size() != self.v[i].size() {
                return Err(Error::Shape(format!("optimizer state for {name} has wrong shape")));
            }
            tch::no_grad(|| {
                self.m[i].copy_(m);
                self.v[i].copy_(v);
            });
            self.steps[i] = find(format!("t/{name}"))?.int64_value(&[0]) as u64;
        }
        Ok(())
    }
}

/// `avg <- decay * avg + (1 - decay) * src` for every variable of `src`.
pub fn ema_update(avg: &VarStore, src: &VarStore, decay: f64) -> Result<()> {
    let avg_vars = avg.variables();
    tch::no_grad(|| {
        for (name, p) in src.variables() {
            let mut a = avg_vars
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("averaged store lacks {name}")))?
                .shallow_clone();
            let next = &a * decay + p * (1.0 - decay);
            a.copy_(&next);
        }
        Ok(())
    })
}

/// Global L2 norm of the defined gradients.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .filter(|g| g.defined())
        .map(|g| g.to_kind(Kind::Double).square().sum(None::<Kind>).double_value(&[]))
        .sum::<f64>()
        .sqrt()
}
