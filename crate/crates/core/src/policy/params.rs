use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Architecture hyperparameters of the tiny MoE policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub num_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    /// Longest context (prompt plus response) the position table covers.
    pub max_positions: usize,
    /// Multiplier on the default initialisation scales.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_layers() -> usize {
    1
}

fn default_init_scale() -> f64 {
    1.0
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("policy.vocab_size", "must be at least 2 (EOS is token 0)"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(
                "policy.top_k",
                format!("need 1 <= top_k <= num_experts ({})", self.num_experts),
            ));
        }
        for (field, v) in [
            ("policy.d_model", self.d_model),
            ("policy.d_hidden", self.d_hidden),
            ("policy.num_layers", self.num_layers),
            ("policy.max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::config("policy.init_scale", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (v, d, h, e) = (self.vocab_size, self.d_model, self.d_hidden, self.num_experts);
        v * d + self.max_positions * d + d * d + self.num_layers * (d * e + e * 2 * d * h) + d * v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w_in: Tensor,
    pub w_out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayerParams {
    pub router: Tensor,
    pub experts: Vec<ExpertParams>,
}

/// All trainable tensors of the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub mixer: Tensor,
    pub layers: Vec<MoeLayerParams>,
    pub output: Tensor,
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..rows * cols).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; rows * cols]
    };
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// Parameter node handles after binding a [`PolicyParams`] to a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub token_embedding: NodeId,
    pub position_embedding: NodeId,
    pub mixer: NodeId,
    pub layers: Vec<BoundLayer>,
    pub output: NodeId,
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub router: NodeId,
    pub experts: Vec<(NodeId, NodeId)>,
}

impl BoundParams {
    /// Node ids in the same order as [`PolicyParams::named_tensors`].
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.token_embedding, self.position_embedding, self.mixer];
        for layer in &self.layers {
            ids.push(layer.router);
            for &(w_in, w_out) in &layer.experts {
                ids.push(w_in);
                ids.push(w_out);
            }
        }
        ids.push(self.output);
        ids
    }
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, h, e) = (
            config.vocab_size,
            config.d_model,
            config.d_hidden,
            config.num_experts,
        );
        let s = config.init_scale;
        let inv_d = s / (d as f64).sqrt();
        let inv_h = s / (h as f64).sqrt();
        let token_embedding = normal_tensor(rng, v, d, 0.5 * s);
        let position_embedding = normal_tensor(rng, config.max_positions, d, 0.5 * s);
        let mixer = normal_tensor(rng, d, d, inv_d);
        let layers = (0..config.num_layers)
            .map(|_| MoeLayerParams {
                router: normal_tensor(rng, d, e, inv_d),
                experts: (0..e)
                    .map(|_| ExpertParams {
                        w_in: normal_tensor(rng, d, h, inv_d),
                        w_out: normal_tensor(rng, h, d, inv_h),
                    })
                    .collect(),
            })
            .collect();
        let output = normal_tensor(rng, d, v, inv_d);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            mixer,
            layers,
            output,
        })
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut params = Self::init(
            PolicyConfig {
                init_scale: 0.0,
                ..config.clone()
            },
            &mut rng,
        )?;
        params.config = config;
        Ok(params)
    }

    /// Tensors in a fixed canonical order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
            ("mixer".to_string(), &self.mixer),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.router"), &layer.router));
            for (x, expert) in layer.experts.iter().enumerate() {
                out.push((format!("layers.{l}.experts.{x}.w_in"), &expert.w_in));
                out.push((format!("layers.{l}.experts.{x}.w_out"), &expert.w_out));
            }
        }
        out.push(("output".to_string(), &self.output));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.mixer,
        ];
        for layer in &mut self.layers {
            out.push(&mut layer.router);
            for expert in &mut layer.experts {
                out.push(&mut expert.w_in);
                out.push(&mut expert.w_out);
            }
        }
        out.push(&mut self.output);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_tensors() {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                what: "flat parameter vector",
                left: flat.len(),
                right: self.num_params(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_flat(flat)?;
        Ok(out)
    }

    /// `self + alpha · direction` over the flattened parameters.
    pub fn perturbed(&self, direction: &[f64], alpha: f64) -> Result<Self> {
        let flat: Vec<f64> = self
            .to_flat()
            .iter()
            .zip(direction)
            .map(|(p, d)| p + alpha * d)
            .collect();
        if direction.len() != flat.len() || flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                what: "perturbation direction",
                left: direction.len(),
                right: self.num_params(),
            });
        }
        self.with_flat(&flat)
    }

    /// Inserts every tensor as a leaf. Trainable leaves receive gradients.
    pub fn bind<'a>(&'a self, graph: &mut Graph<'a>, trainable: bool) -> BoundParams {
        let mut leaf = |t: &'a Tensor| {
            if trainable {
                graph.param_ref(t)
            } else {
                graph.constant_ref(t)
            }
        };
        let token_embedding = leaf(&self.token_embedding);
        let position_embedding = leaf(&self.position_embedding);
        let mixer = leaf(&self.mixer);
        let layers = self
            .layers
            .iter()
            .map(|layer| BoundLayer {
                router: leaf(&layer.router),
                experts: layer
                    .experts
                    .iter()
                    .map(|x| (leaf(&x.w_in), leaf(&x.w_out)))
                    .collect(),
            })
            .collect();
        let output = leaf(&self.output);
        BoundParams {
            token_embedding,
            position_embedding,
            mixer,
            layers,
            output,
        }
    }
}
