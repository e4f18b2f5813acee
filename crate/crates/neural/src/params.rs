//! Named parameter tensors and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    /// Included in the L2 penalty (weights yes, biases no).
    pub decay: Vec<bool>,
    pub trainable: Vec<bool>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor, decay: bool, trainable: bool) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.decay.push(decay);
        self.trainable.push(trainable);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `Σ w²` over decayed parameters.
    pub fn l2_sum(&self) -> f64 {
        self.tensors
            .iter()
            .zip(&self.decay)
            .filter(|(_, d)| **d)
            .map(|(t, _)| t.sq_norm())
            .sum()
    }

    /// Adds `2β·w` to the gradients of decayed parameters.
    pub fn add_l2_grad(&self, grads: &mut [Tensor], beta: f64) {
        for ((g, t), d) in grads.iter_mut().zip(&self.tensors).zip(&self.decay) {
            if *d {
                for (gv, w) in g.data.iter_mut().zip(&t.data) {
                    *gv += 2.0 * beta * w;
                }
            }
        }
    }
}

/// Rescales `grads` to global norm `max_norm` when above it. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

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
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        #[allow(clippy::needless_range_loop)]
        for i in 0..params.len() {
            if !params.trainable[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for (j, w) in params.tensors[i].data.iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                *w -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
    }
}
