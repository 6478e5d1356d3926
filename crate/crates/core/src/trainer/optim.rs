use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Rescales the gradient to this global L2 norm when exceeded.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            max_grad_norm: None,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        for (field, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config("optimizer.max_grad_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// One Adam step on flat slices. `step` is the 1-based step count.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    config: &OptimizerConfig,
) {
    let c1 = 1.0 - config.beta1.powi(step as i32);
    let c2 = 1.0 - config.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
}

pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Optimizer with its moment buffers, laid out like the parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &PolicyParams) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// Applies one update; `grads` follow [`PolicyParams::named_tensors`].
    /// Returns the gradient norm before any clipping.
    pub fn apply(&mut self, params: &mut PolicyParams, grads: &[Tensor]) -> Result<f64> {
        let mut tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::LengthMismatch {
                what: "gradients vs parameters",
                left: grads.len(),
                right: tensors.len(),
            });
        }
        for (p, g) in tensors.iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(Error::ShapeMismatch {
                    op: "optimizer",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        let norm = grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::InvalidArgument("non-finite gradient".into()));
        }
        let factor = match self.config.max_grad_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        for (i, (p, g)) in tensors.iter_mut().zip(grads).enumerate() {
            let g: Vec<f64> = g.data().iter().map(|x| x * factor).collect();
            match self.config.kind {
                OptimizerKind::Adam => adam_update(
                    p.data_mut(),
                    &g,
                    self.first[i].data_mut(),
                    self.second[i].data_mut(),
                    self.step,
                    &self.config,
                ),
                OptimizerKind::Sgd => sgd_update(p.data_mut(), &g, self.config.lr),
            }
        }
        Ok(norm)
    }
}
