use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed, named parameter list. Moment buffers are kept by
/// parameter name so they can be checkpointed and restored.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Tensor)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: Vec<(String, Tensor)>) -> Self {
        let first = params.iter().map(|(_, p)| p.zeros_like()).collect();
        let second = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Self {
            cfg,
            params,
            first,
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            p.zero_grad();
        }
    }

    /// Backpropagates `loss` and updates every owned parameter. Gradients
    /// that reach parameters outside this optimizer are left for the caller
    /// to discard.
    pub fn backward_step(&mut self, loss: &Tensor) {
        self.zero_grad();
        loss.backward();
        self.step();
    }

    pub fn step(&mut self) {
        let _guard = tch::no_grad_guard();
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (i, (_, p)) in self.params.iter_mut().enumerate() {
            let grad = p.grad();
            if !grad.defined() {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            *m = &*m * beta1 + &grad * (1.0 - beta1);
            *v = &*v * beta2 + grad.square() * (1.0 - beta2);
            let update = (&*m / bias1) / ((&*v / bias2).sqrt() + eps) * learning_rate;
            let _ = p.f_sub_(&update).expect("in-place parameter update");
        }
    }

    /// Moment buffers and step count as named tensors.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}/steps"),
            Tensor::from_slice(&[self.steps as i64]),
        )];
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("{prefix}/m/{name}"), self.first[i].shallow_clone()));
            out.push((format!("{prefix}/v/{name}"), self.second[i].shallow_clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let missing = |n: &str| Error::Checkpoint(format!("optimizer state missing {n}"));
        let steps_key = format!("{prefix}/steps");
        let steps = values.get(&steps_key).ok_or_else(|| missing(&steps_key))?;
        self.steps = steps.int64_value(&[0]) as u64;
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (kind, buf) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("{prefix}/{kind}/{name}");
                let src = values.get(&key).ok_or_else(|| missing(&key))?;
                if src.size() != p.size() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has wrong shape")));
                }
                *buf = src.to_kind(Kind::Float).copy();
            }
        }
        Ok(())
    }
}
