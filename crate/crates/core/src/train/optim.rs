//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::backend::params::ParameterStore;
use crate::tensor::{cast, Float, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Biases and normalization gains/offsets are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm."))
}

/// First/second moment estimates, indexed like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Option<Matrix<T>>>,
    pub second: Vec<Option<Matrix<T>>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            first: vec![None; num_params],
            second: vec![None; num_params],
        }
    }

    /// Grows the state after parameters were appended to the store.
    pub fn resize(&mut self, num_params: usize) {
        self.first.resize(num_params, None);
        self.second.resize(num_params, None);
    }
}

impl AdamW {
    /// Applies one update to every parameter that has a gradient.
    pub fn step<T: Float>(
        &self,
        store: &mut ParameterStore<T>,
        state: &mut OptimizerState<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) {
        state.resize(store.len());
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1: T = cast(self.beta1);
        let b2: T = cast(self.beta2);
        let one = T::one();
        let eps: T = cast(self.eps);
        let step_size: T = cast(lr / bc1);
        let bc2_sqrt: T = cast(bc2.sqrt());
        for (id, grad) in grads.iter() {
            let decay = decays(store.name(id));
            let (rows, cols) = grad.shape();
            let m = state.first[id].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = state.second[id].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let param = store.get_mut(id);
            if decay && self.weight_decay > 0.0 {
                let keep: T = cast(1.0 - lr * self.weight_decay);
                param.scale_assign(keep);
            }
            for (((p, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let denom = vi.sqrt() / bc2_sqrt + eps;
                *p -= step_size * *mi / denom;
            }
        }
    }
}
