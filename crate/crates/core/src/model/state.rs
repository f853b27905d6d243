use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter store for a backbone.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    params: BTreeMap<String, Param>,
}

impl ModelState {
    /// Random initialization: N(0, 0.02) matrices with residual output
    /// projections scaled by 1/√(2·n_layers), unit norm weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_std = INIT_STD / (2.0 * config.n_layers as f32).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("norm") {
                vec![1.0; n]
            } else {
                let std = if name.ends_with(".wo") || name.ends_with("w_down") {
                    residual_std
                } else {
                    INIT_STD
                };
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            params.insert(
                name,
                Param {
                    tensor: Tensor::new(data, &shape)?,
                    trainable: false,
                },
            );
        }
        Ok(ModelState { config, params })
    }

    /// Every parameter, including norm weights, set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                (
                    name,
                    Param {
                        tensor: Tensor::zeros(&shape),
                        trainable: false,
                    },
                )
            })
            .collect();
        Ok(ModelState { config, params })
    }

    /// Rebuilds a state from loaded tensors, checking the manifest against the config.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            params.insert(
                name,
                Param {
                    tensor: t.detach(),
                    trainable: false,
                },
            );
        }
        Ok(ModelState { config, params })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub(crate) fn layer(&self, layer: usize, name: &str) -> Result<&Tensor> {
        self.get(&format!("layers.{layer}.{name}"))
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "ModelState::set",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor.with_requires_grad(p.trainable);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
            p.tensor = p.tensor.with_requires_grad(trainable);
        }
    }

    /// Marks every parameter frozen: `trainable = false` and `requires_grad = false`.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.params
            .values()
            .all(|p| !p.trainable && !p.tensor.requires_grad())
    }

    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// SHA-256 over every parameter's name, shape and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
