use serde::{Deserialize, Serialize};

use super::{Array, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Array> = params.iter().map(|p| Array::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Bias-corrected Adam update from the stored gradients, which are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            p.grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Array::full(&[3], value));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = store(1.5);
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params);
        assert_eq!(adam.step_count(), 1);
        assert!(params.iter().next().unwrap().value.data().iter().all(|&x| x == 1.5));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = store(0.0);
        params.iter_mut().next().unwrap().grad.fill(0.37);
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params);
        for &x in params.iter().next().unwrap().value.data() {
            // m_hat = g, v_hat = g², so the step is lr·g/(|g|+eps)
            assert!((x + 0.001).abs() < 1e-9, "{x}");
        }
        assert!(params.iter().next().unwrap().grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identical_runs_give_identical_trajectories() {
        let run = || {
            let mut params = store(0.2);
            let mut adam = AdamState::new(&params, AdamConfig::default());
            for k in 0..20 {
                let p = params.iter_mut().next().unwrap();
                let g: Vec<f64> = p.value.data().iter().map(|w| 2.0 * w + k as f64 * 0.01).collect();
                p.grad.data_mut().copy_from_slice(&g);
                adam.step(&mut params);
            }
            let out = params.iter().next().unwrap().value.clone();
            out
        };
        assert_eq!(run(), run());
    }
}
