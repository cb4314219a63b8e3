//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let m: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = m.clone();
        Self { cfg, step: 0, m, v }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(
        cfg: AdamWConfig,
        step: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
        params: &ParamStore,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::invalid(
                "optimizer state does not match parameter count",
            ));
        }
        for ((a, b), (name, t)) in m.iter().zip(&v).zip(params.iter()) {
            if a.len() != t.numel() || b.len() != t.numel() {
                return Err(Error::invalid(format!(
                    "optimizer moments for {name} have the wrong size"
                )));
            }
        }
        Ok(Self { cfg, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// One update with learning rate `lr`. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f32) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(
                "parameter set changed since optimizer creation",
            ));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::invalid(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1 as f64, self.step as f64) as f32;
        let bc2 = 1.0 - libm::pow(beta2 as f64, self.step as f64) as f32;
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let (data, grad) = t.data_and_grad_mut();
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..data.len() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= lr * (mh / (libm::sqrtf(vh) + eps) + weight_decay * data[k]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f32,
    pub lr_min: f32,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_max: f32, lr_min: f32, total_steps: u64) -> Result<Self> {
        if !(lr_min <= lr_max) || total_steps == 0 {
            return Err(Error::invalid(format!(
                "bad cosine schedule: lr_max {lr_max}, lr_min {lr_min}, total_steps {total_steps}"
            )));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_steps,
        })
    }

    /// Learning rate at `step`; steps past the end are clamped to `total_steps`.
    pub fn lr(&self, step: u64) -> f32 {
        let s = step.min(self.total_steps) as f64 / self.total_steps as f64;
        let (hi, lo) = (self.lr_max as f64, self.lr_min as f64);
        (lo + 0.5 * (hi - lo) * (1.0 + libm::cos(core::f64::consts::PI * s))) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(2.5e-5, 3e-6, 1000).unwrap();
        assert_eq!(s.lr(0), 2.5e-5);
        assert!((s.lr(1000) - 3e-6).abs() < 1e-12);
        assert!((s.lr(500) - (2.5e-5 + 3e-6) / 2.0).abs() < 1e-10);
        assert_eq!(s.lr(5000), s.lr(1000));
    }

    #[test]
    fn bad_schedule_rejected() {
        assert!(CosineSchedule::new(1e-3, 1e-2, 10).is_err());
        assert!(CosineSchedule::new(1e-3, 1e-4, 0).is_err());
    }

    fn quadratic_step(lr: f32, wd: f32) -> f32 {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Tensor::scalar(1.0));
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        ps.get_mut(id).grad_mut().unwrap()[0] = 2.0; // d/dx x^2 at 1
        opt.step(&mut ps, lr).unwrap();
        ps.get(id).data()[0]
    }

    #[test]
    fn one_step_descends() {
        assert!(quadratic_step(0.1, 0.0) < 1.0);
    }

    #[test]
    fn zero_lr_is_noop() {
        assert_eq!(quadratic_step(0.0, 1e-4), 1.0);
    }
}
