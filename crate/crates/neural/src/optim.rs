//! AdamW with a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::params::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NeuralError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Learning rate at `step` of `total` under half-period cosine annealing.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Decoupled-weight-decay Adam state for every parameter of a registry.
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(reg: &Registry, cfg: &OptimConfig) -> Result<AdamW> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = reg.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(AdamW {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, reg: &mut Registry, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(NeuralError::Shape(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let p = reg.param_mut(i).value.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                p[k] -= lr * (update + c.weight_decay * p[k]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamTag;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut reg = Registry::new();
        reg.add("x", ParamTag::Shared, Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&reg, &OptimConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }).unwrap();
        for _ in 0..500 {
            let g: Vec<f64> = reg.get("x").unwrap().data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut reg, &[g], 0.05).unwrap();
        }
        assert!(reg.get("x").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut reg = Registry::new();
        reg.add("x", ParamTag::Shared, Tensor::new(&[1], vec![1.5]).unwrap()).unwrap();
        let before = reg.clone();
        let mut opt = AdamW::new(&reg, &OptimConfig::default()).unwrap();
        opt.step(&mut reg, &[vec![4.0]], 0.0).unwrap();
        assert_eq!(reg, before);
    }
}
