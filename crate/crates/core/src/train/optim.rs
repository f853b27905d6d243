use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once before updating the step's tensors.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updated copy of `param` (same gradient flag) after one Adam step.
    pub fn update(&mut self, name: &str, param: &Tensor, grad: &[f32]) -> Result<Tensor> {
        if grad.len() != param.numel() {
            return Err(Error::Shape {
                op: "adam",
                lhs: param.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        if self.t == 0 {
            return Err(Error::State("Adam::update before tick".into()));
        }
        let n = grad.len();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut out = param.to_vec();
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            out[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
        Ok(Tensor::new(out, param.shape())?.with_requires_grad(param.requires_grad()))
    }
}
