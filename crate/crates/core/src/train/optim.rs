use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay. Moments are created lazily, and only
/// for parameters that require gradients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub weight_decay: f64,
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, weight_decay: f64) -> Self {
        Adam { config, weight_decay, t: 0, moments: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &[(String, Param)], lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (name, p) in params {
            if !p.tensor.requires_grad() {
                continue;
            }
            let grad = p.tensor.grad_ref();
            let Some(g) = grad.as_ref() else {
                return Err(Error::Consistency(format!("trainable parameter `{name}` has no gradient")));
            };
            let n = g.len();
            let mom = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let mut w = p.tensor.data_mut();
            for i in 0..n {
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g[i];
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + eps) + self.weight_decay * w[i]);
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Linear warmup to `peak` over the first `warmup` steps, then linear decay
/// towards zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub total: usize,
    pub warmup: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total: usize, warmup_ratio: f64) -> Self {
        let warmup = ((warmup_ratio * total as f64).ceil() as usize).min(total);
        LinearSchedule { peak, total, warmup }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * (step + 1) as f64 / self.warmup as f64
        } else if step >= self.total {
            0.0
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;
    use crate::tensor::Tensor;

    fn scalar_param(w: f64) -> (String, Param) {
        ("w".into(), Param::new(Tensor::param(vec![w], &[1]).unwrap(), ParamGroup::Adapter))
    }

    #[test]
    fn first_step_on_a_parabola() {
        let params = [scalar_param(1.0)];
        let w = &params[0].1.tensor;
        w.mul(w).unwrap().sum().backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default(), 0.001);
        adam.step(&params, 0.1).unwrap();
        // hand-run recurrence: g=2, m̂=2, v̂=4, update = 2/(2+1e-8) + 0.001
        let want = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8) + 0.001);
        assert!((w.item() - want).abs() < 1e-15);
        assert!((w.item() - 0.9).abs() < 1e-3);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let params = [scalar_param(0.7)];
        params[0].1.tensor.reset_grad();
        let mut adam = Adam::new(AdamConfig::default(), 0.0);
        for _ in 0..3 {
            adam.step(&params, 0.5).unwrap();
        }
        assert_eq!(params[0].1.tensor.item(), 0.7);
    }

    #[test]
    fn frozen_and_missing_gradients() {
        let frozen = scalar_param(0.3);
        frozen.1.tensor.set_requires_grad(false);
        let mut adam = Adam::new(AdamConfig::default(), 0.001);
        adam.step(std::slice::from_ref(&frozen), 0.1).unwrap();
        assert_eq!(frozen.1.tensor.item().to_bits(), 0.3f64.to_bits());
        assert!(adam.moments.is_empty());

        let missing = scalar_param(0.3);
        assert!(matches!(adam.step(&[missing], 0.1), Err(Error::Consistency(_))));
    }

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::new(1.0, 20, 0.1);
        assert_eq!(s.warmup, 2);
        assert_eq!(s.lr(0), 0.5);
        assert_eq!(s.lr(1), 1.0);
        assert_eq!(s.lr(2), 1.0);
        assert!((s.lr(11) - 0.5).abs() < 1e-12);
        assert!(s.lr(19) > 0.0);
        assert_eq!(s.lr(20), 0.0);
        for t in 2..19 {
            assert!(s.lr(t + 1) < s.lr(t));
        }
    }
}
