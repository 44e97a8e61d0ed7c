use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};

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

/// Adam over a fixed group of parameters. Moment buffers persist across
/// steps; parameters outside the group are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    group: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, group: Vec<ParamId>, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = group.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        Self {
            config,
            v: m.clone(),
            m,
            group,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    pub fn first_moment(&self, slot: usize) -> &[f64] {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[f64] {
        &self.v[slot]
    }

    /// Applies one bias-corrected update. Every parameter in the group must
    /// have a populated gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(&id) = self.group.iter().find(|&&id| store.grad(id).is_none()) {
            return Err(TensorError::MissingGrad(store.name(id).to_string()));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (slot, &id) in self.group.iter().enumerate() {
            let grad = store.grad(id).expect("checked above").data().to_vec();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let value = store.value_mut(id).data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
