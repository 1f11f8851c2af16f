use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Adam with linear warmup and linear decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// Peak learning rate for encoder weights and task heads.
    pub weight_lr: f64,
    /// Peak learning rate for mask logits ν.
    pub mask_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            weight_lr: 1e-3,
            mask_lr: 2e-1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.1,
            total_steps: 500,
            batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    /// Defaults for masked-token pre-training of the desk-scale encoder:
    /// larger batches and a higher peak rate than fine-tuning.
    pub fn pretraining() -> Self {
        OptimizerConfig {
            weight_lr: 3e-3,
            total_steps: 1500,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight_lr > 0.0 && self.mask_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).floor() as usize
    }

    /// Multiplier of the peak rate at step `t ∈ [0, T]`: rises linearly from
    /// 0 at `t = 0` to 1 at the end of warmup, then decays linearly to 0 at
    /// `t = T`. Update `t` (0-based) uses `lr_scale(t)`; without warmup the
    /// first update runs at the peak rate.
    pub fn lr_scale(&self, t: usize) -> f64 {
        let total = self.total_steps;
        let w = self.warmup_steps();
        if t >= total {
            0.0
        } else if t < w {
            t as f64 / w as f64
        } else {
            (total - t) as f64 / (total - w) as f64
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-tensor Adam state keyed by name.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    /// Advances the bias-correction step counter; call once per update.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam", param.shape(), grad.shape()));
        }
        let n = param.len();
        let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        if !param.is_finite() {
            return Err(Error::NonFinite("adam update"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = OptimizerConfig {
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(c.lr_scale(0), 0.0);
        assert_eq!(c.lr_scale(5), 0.5);
        assert_eq!(c.lr_scale(10), 1.0);
        assert_eq!(c.lr_scale(55), 0.5);
        assert_eq!(c.lr_scale(100), 0.0);
        let flat = OptimizerConfig {
            total_steps: 10,
            warmup_fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(flat.lr_scale(0), 1.0);
    }

    #[test]
    fn first_adam_step_has_unit_magnitude() {
        let c = OptimizerConfig::default();
        let mut a = Adam::new(&c);
        let mut p = Tensor::vector(&[1.0, 1.0]);
        a.begin_step();
        a.update("p", &mut p, &Tensor::vector(&[0.003, -50.0]), 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let c = OptimizerConfig::default();
        let mut a = Adam::new(&c);
        let mut p = Tensor::vector(&[3.0]);
        for _ in 0..2000 {
            a.begin_step();
            let g = p.clone();
            a.update("p", &mut p, &g, 0.01).unwrap();
        }
        assert!(p.data()[0].abs() < 1e-2);
    }
}
