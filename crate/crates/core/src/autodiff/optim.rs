use serde::{Deserialize, Serialize};

use super::store::ParamStore;
use crate::error::{Error, Result};

/// Cosine annealing of the learning rate over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub total_steps: usize,
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub cosine: Option<CosineSchedule>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            cosine: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(self.beta1) || !ok(self.beta2) {
            return Err(Error::contract("optim", "betas must lie in (0, 1)"));
        }
        if !(self.lr >= 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::contract("optim", "lr, eps and weight_decay must be non-negative"));
        }
        if matches!(self.cosine, Some(CosineSchedule { total_steps: 0 })) {
            return Err(Error::contract("optim", "cosine schedule needs total_steps > 0"));
        }
        Ok(())
    }

    /// Learning rate at zero-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.cosine {
            None => self.lr,
            Some(CosineSchedule { total_steps }) => {
                let frac = (t.min(total_steps) as f64) / total_steps as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// One AdamW update at zero-based step `t` with decoupled weight decay.
pub fn adam_step(store: &mut ParamStore, cfg: &OptimConfig, t: usize) -> Result<()> {
    cfg.validate()?;
    if let Some((name, _)) = store.iter().find(|(_, s)| s.grad.is_none()) {
        return Err(Error::contract("adam_step", format!("no gradient for {name}")));
    }
    let lr = cfg.lr_at(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32 + 1);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32 + 1);
    for (_, slot) in store.slots_mut() {
        let g = slot.grad.as_ref().expect("checked above").data();
        let p = slot.value.data_mut();
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64) -> ParamStore {
        ParamStore::from_named([("p".to_string(), Tensor::scalar(p))]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.75);
        s.set_grad("p", Tensor::scalar(0.0)).unwrap();
        adam_step(&mut s, &OptimConfig::default(), 0).unwrap();
        assert_eq!(s.value("p").unwrap().data(), &[0.75]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.set_grad("p", Tensor::scalar(1.0)).unwrap();
        let cfg = OptimConfig::default();
        adam_step(&mut s, &cfg, 0).unwrap();
        let p = s.value("p").unwrap().data()[0];
        let delta = (1.0 - p).abs();
        assert!((p - 0.999).abs() < 1e-8);
        assert!(delta <= cfg.lr + cfg.eps);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(1.0);
        assert!(adam_step(&mut s, &OptimConfig::default(), 0).is_err());
    }

    #[test]
    fn bad_betas_rejected() {
        let cfg = OptimConfig {
            beta1: 1.0,
            ..OptimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimConfig {
            cosine: Some(CosineSchedule { total_steps: 100 }),
            ..OptimConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(50) - 5e-4).abs() < 1e-15);
        assert!(cfg.lr_at(100).abs() < 1e-15);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // L = 3(a - 1)^2 + (b + 2)^2
        let loss = |a: f64, b: f64| 3.0 * (a - 1.0).powi(2) + (b + 2.0).powi(2);
        let mut s = ParamStore::from_named([
            ("a".to_string(), Tensor::scalar(4.0)),
            ("b".to_string(), Tensor::scalar(3.0)),
        ])
        .unwrap();
        let cfg = OptimConfig {
            lr: 0.01,
            ..OptimConfig::default()
        };
        let mut prev = f64::INFINITY;
        for t in 0..100 {
            let a = s.value("a").unwrap().data()[0];
            let b = s.value("b").unwrap().data()[0];
            let l = loss(a, b);
            assert!(l < prev, "step {t}: {l} >= {prev}");
            prev = l;
            s.set_grad("a", Tensor::scalar(6.0 * (a - 1.0))).unwrap();
            s.set_grad("b", Tensor::scalar(2.0 * (b + 2.0))).unwrap();
            adam_step(&mut s, &cfg, t).unwrap();
        }
    }
}
