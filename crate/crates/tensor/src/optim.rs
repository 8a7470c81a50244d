use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates, one slot per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            steps: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update at learning rate `lr` to every parameter that
    /// received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if store.is_frozen() {
            return Err(TensorError::invalid("Adam::step", "store is frozen"));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(eps);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(store.key(id)) else { continue };
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<index>` / `v.<index>` plus the step count.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("steps".to_string(), Tensor::scalar(T::lit(self.steps as f64)))];
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            if let (Some(m), Some(v)) = (m, v) {
                out.push((format!("m.{i}"), m.clone()));
                out.push((format!("v.{i}"), v.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, named: &std::collections::HashMap<String, Tensor<T>>) -> Result<()> {
        let steps = named
            .get("steps")
            .ok_or_else(|| TensorError::Archive("optimizer state without step count".into()))?;
        self.steps = steps.data()[0].to_f64_lossy() as u64;
        for i in 0..self.first.len() {
            self.first[i] = named.get(&format!("m.{i}")).cloned();
            self.second[i] = named.get(&format!("v.{i}")).cloned();
        }
        Ok(())
    }
}
