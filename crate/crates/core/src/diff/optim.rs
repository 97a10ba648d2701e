use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Register every parameter as an untracked constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Collect gradients for bound parameters after `backward`.
    pub fn grads(&self, tape: &Tape, bound: &[Var]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }

    /// Replace values from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Data("parameter stores have different layouts".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape != b.shape {
                return Err(Error::shape("ParamStore::copy_from", &a.shape, &b.shape));
            }
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn l2_norms(&self) -> Vec<(String, f64)> {
        self.iter()
            .map(|(_, n, t)| (n.to_string(), t.data.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_decay() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: default_lr(),
            decay: default_decay(),
            epsilon: default_eps(),
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("rmsprop decay must lie in (0, 1), got {}", self.decay)));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("rmsprop learning rate and epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// RMSProp: `v <- rho v + (1 - rho) g^2`, `theta <- theta - lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    mean_sq: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &ParamStore) -> Self {
        RmsProp {
            config,
            mean_sq: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn mean_sq(&self) -> &[Vec<f64>] {
        &self.mean_sq
    }

    /// Apply one update and zero `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Vec<f64>]) {
        let RmsPropConfig {
            learning_rate: lr,
            decay: rho,
            epsilon: eps,
        } = self.config;
        for ((t, g), v) in params.tensors.iter_mut().zip(grads.iter_mut()).zip(&mut self.mean_sq) {
            for ((theta, g), v) in t.data.iter_mut().zip(g.iter_mut()).zip(v.iter_mut()) {
                *v = rho * *v + (1.0 - rho) * *g * *g;
                *theta -= lr * *g / (v.sqrt() + eps);
                *g = 0.0;
            }
        }
    }
}
