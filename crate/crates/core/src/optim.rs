//! Bias-corrected Adam over the trainable subset of a model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::gradcheck::HasParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored in the model.
    /// Frozen tensors are skipped entirely.
    pub fn step<M: HasParams + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in model.params_mut() {
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let g = p.grad.data();
            for (((theta, mi), vi), gi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g)
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::join;
    use crate::tensor::ParamTensor;

    struct Pair {
        live: ParamTensor,
        frozen: ParamTensor,
    }

    impl HasParams for Pair {
        fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
            out.push((join(prefix, "live"), &self.live));
            out.push((join(prefix, "frozen"), &self.frozen));
        }
        fn collect_params_mut<'a>(
            &'a mut self,
            prefix: &str,
            out: &mut Vec<(String, &'a mut ParamTensor)>,
        ) {
            out.push((join(prefix, "live"), &mut self.live));
            out.push((join(prefix, "frozen"), &mut self.frozen));
        }
    }

    fn pair() -> Pair {
        Pair {
            live: ParamTensor::trainable(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()),
            frozen: ParamTensor::frozen(Tensor::new(vec![2], vec![1.5, -0.25]).unwrap()),
        }
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = pair();
        let before = p.live.value.clone();
        Adam::new(AdamConfig::default()).step(&mut p);
        assert_eq!(p.live.value, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = pair();
        let g = [0.3, -2.0, 1e-3];
        p.live.grad = Tensor::new(vec![3], g.to_vec()).unwrap();
        let cfg = AdamConfig::default();
        let before = p.live.value.clone();
        Adam::new(cfg).step(&mut p);
        for i in 0..3 {
            let expected = before.data()[i] - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p.live.value.data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_survives_many_steps() {
        let mut p = pair();
        let before = p.frozen.value.clone();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            p.live.grad = Tensor::filled(&[3], 0.7);
            p.frozen.grad = Tensor::filled(&[2], 0.7);
            opt.step(&mut p);
        }
        assert_eq!(p.frozen.value, before);
        assert_eq!(opt.steps(), 100);
    }
}
