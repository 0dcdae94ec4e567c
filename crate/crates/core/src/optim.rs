//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of completed steps; drives bias correction.
    pub step: u64,
    pub state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, state: BTreeMap::new() }
    }

    /// Updates every trainable parameter from its gradient. Frozen parameters
    /// are never written.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let n = p.value.numel();
            let mom = self.state.entry(id).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let moments = mom.m.iter_mut().zip(mom.v.iter_mut());
            for ((x, &gk), (m, v)) in p.value.data_mut().iter_mut().zip(grad.data()).zip(moments) {
                *x *= 1.0 - lr * weight_decay;
                *m = beta1 * *m + (1.0 - beta1) * gk;
                *v = beta2 * *v + (1.0 - beta2) * gk * gk;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
