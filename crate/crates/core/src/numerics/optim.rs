use std::collections::{BTreeMap, BTreeSet};

use super::tensor::Tensor;
use crate::error::{HpnetError, Result};

/// Momentum SGD over named parameters: `v ← μ·v + g`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct SgdOptimizer {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
    frozen: BTreeSet<String>,
}

impl SgdOptimizer {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(HpnetError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(HpnetError::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(SgdOptimizer {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
            frozen: BTreeSet::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(HpnetError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        self.learning_rate = learning_rate;
        Ok(())
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Registers a parameter with a zero velocity buffer (idempotent).
    pub fn register(&mut self, name: &str, len: usize) {
        self.velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len]);
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies one update; frozen parameters and their velocities are untouched.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(HpnetError::Dimension(format!(
                "gradient for {name} has {} elements, parameter has {}",
                grad.len(),
                param.numel()
            )));
        }
        self.register(name, param.numel());
        if self.is_frozen(name) {
            return Ok(());
        }
        let v = self.velocity.get_mut(name).expect("registered");
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, vi), &g) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = mu * *vi + g;
            *p -= lr * *vi;
        }
        Ok(())
    }
}
