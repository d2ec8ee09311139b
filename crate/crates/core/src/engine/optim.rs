use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Tensor>,
    second: IndexMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "{name}: gradient {:?} for {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors for persistence: `(name, first, second)`.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.first.iter().map(|(k, m)| (k.as_str(), m, &self.second[k]))
    }

    pub fn restore(config: AdamConfig, step: u64, moments: Vec<(String, Tensor, Tensor)>) -> Self {
        let mut adam = Self::new(config);
        adam.step = step;
        for (name, m, v) in moments {
            adam.first.insert(name.clone(), m);
            adam.second.insert(name, v);
        }
        adam
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::params::ParamKind;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::default();
        store.insert(
            "w",
            Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(),
            ParamKind::Trainable,
        );
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::new(&[3], vec![0.3, -4.0, 0.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grads, 0.01).unwrap();
        let w = store.get("w").unwrap();
        // bias-corrected first step is lr·g/(|g|+eps)
        assert!((w.data()[0] - 0.99).abs() < 1e-7);
        assert!((w.data()[1] + 1.99).abs() < 1e-7);
        assert_eq!(w.data()[2], 0.5);
    }
}
