use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam hyper-parameters.
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

/// Adam optimizer state: one pair of moment tensors per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let first: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value().shape()))
            .collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// Rebuilds state from saved moments.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
    ) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::Config("adam moment lists differ in length".into()));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Applies one bias-corrected update and zeroes every gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer holds state for {} parameters, model has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter().enumerate() {
            if self.first[i].shape() != p.value().shape() {
                return Err(Error::Config(format!(
                    "optimizer state shape mismatch for {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let g = p.grad().data().to_vec();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = p.value_mut().data_mut();
            for k in 0..g.len() {
                let gk = g[k] as f64;
                let mk = beta1 * m[k] as f64 + (1.0 - beta1) * gk;
                let vk = beta2 * v[k] as f64 + (1.0 - beta2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let m_hat = mk / c1;
                let v_hat = vk / c2;
                w[k] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = single(0.5);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.iter().next().unwrap().value().data()[0], 0.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = single(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        store.iter_mut().next().unwrap().grad_mut().data_mut()[0] = 1.0;
        adam.step(&mut store).unwrap();
        let p = store.iter().next().unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!(
            (p.value().data()[0] as f64 - expected).abs() < 1e-9,
            "{}",
            p.value().data()[0]
        );
        assert_eq!(p.grad().data()[0], 0.0);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut store = single(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..100 {
            store.iter_mut().next().unwrap().grad_mut().data_mut()[0] = -0.3;
            adam.step(&mut store).unwrap();
        }
        assert!(store.iter().next().unwrap().value().data()[0] > 1.05);
    }

    #[test]
    fn missing_state_is_a_configuration_error() {
        let mut store = single(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        store.add("extra", Tensor::scalar(0.0));
        assert!(matches!(adam.step(&mut store), Err(Error::Config(_))));
    }
}
