//! Stochastic gradient descent with momentum.

use std::collections::HashMap;

use crate::models::ParamSet;
use crate::tensor::Precision;

/// SGD with classical momentum. Velocity buffers are keyed by parameter name
/// and updated in parameter order, so steps are deterministic. Frozen
/// parameter sets are left untouched.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Apply one step to a parameter set given gradients aligned with its
    /// parameter order. Updated values are rounded onto the precision grid.
    pub fn step(&mut self, set: &mut ParamSet, grads: &[Option<Vec<f64>>], precision: Precision) {
        if set.frozen {
            return;
        }
        for (p, g) in set.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let vals = p.tensor.values_mut();
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i];
                vals[i] = precision.quantize(vals[i] - self.lr * v[i]);
            }
        }
    }
}
