//! Bias-corrected Adam with a step-decay learning-rate schedule. Weight
//! decay is coupled by default (folded into the gradient); decoupled decay
//! is available for the heavy-decay segmentation profile.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::nn::{NnError, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {name:?}")]
    NonFiniteGradient { name: String },
    #[error("optimizer state for {name:?} has {state} entries, parameter has {param}")]
    StateShape { name: String, state: usize, param: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

type Result<V> = std::result::Result<V, OptimError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply decay directly to the parameter instead of through the
    /// gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decoupled: false }
    }
}

impl AdamConfig {
    pub fn with_decay(weight_decay: f64, decoupled: bool) -> Self {
        AdamConfig { weight_decay, decoupled, ..Default::default() }
    }
}

/// `base_lr × 0.5^⌈epoch/10⌉`: one halving applies within each ten-epoch
/// block, so epochs 1..=10 run at half rate, 11..=20 at a quarter, and
/// sampled at multiples of ten the rate is exactly half the previous sample.
pub fn lr_at(base_lr: f64, epoch: usize) -> f64 {
    base_lr * 0.5f64.powi(epoch.div_ceil(10) as i32)
}

/// Adam state over named parameters. Moments appear lazily the first time a
/// parameter is stepped; the step counter is shared (every parameter is
/// stepped together).
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the named parameters using their accumulated
    /// gradients. Replacing the stored tensors also discards their
    /// gradients, so the caller never zeroes explicitly between steps.
    pub fn step(&mut self, store: &mut ParamStore<T>, names: &[String], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.eps);
        let lr = T::from_f64(lr);
        let wd = T::from_f64(self.config.weight_decay);
        let corr1 = T::one() - T::from_f64(self.config.beta1.powi(t));
        let corr2 = T::one() - T::from_f64(self.config.beta2.powi(t));
        for name in names {
            let grad = store.grad(name)?;
            if grad.iter().any(|&g| !g.to_f64().is_finite()) {
                return Err(OptimError::NonFiniteGradient { name: name.clone() });
            }
            let mut theta = store.get(name)?.values().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); theta.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); theta.len()]);
            if m.len() != theta.len() {
                return Err(OptimError::StateShape {
                    name: name.clone(),
                    state: m.len(),
                    param: theta.len(),
                });
            }
            for i in 0..theta.len() {
                let mut g = grad[i];
                if !self.config.decoupled {
                    g += wd * theta[i];
                }
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                let mut update = lr * m_hat / (v_hat.sqrt() + eps);
                if self.config.decoupled {
                    update += lr * wd * theta[i];
                }
                theta[i] -= update;
            }
            store.set_values(name, theta)?;
        }
        Ok(())
    }

    /// Flatten moments and step counter into named tensors for a
    /// checkpoint: `optim.m.<param>`, `optim.v.<param>`, `optim.step`.
    pub fn export_state(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::with_capacity(self.m.len() * 2 + 1);
        for (name, m) in &self.m {
            out.push((format!("optim.m.{name}"), m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("optim.v.{name}"), v.clone()));
        }
        out.push(("optim.step".into(), vec![T::from_f64(self.step as f64)]));
        out
    }

    /// Restore from checkpoint tensors produced by [`Adam::export_state`].
    pub fn import_state(&mut self, entries: &[(String, Vec<T>)]) {
        for (name, values) in entries {
            if let Some(param) = name.strip_prefix("optim.m.") {
                self.m.insert(param.into(), values.clone());
            } else if let Some(param) = name.strip_prefix("optim.v.") {
                self.v.insert(param.into(), values.clone());
            } else if name == "optim.step" {
                self.step = values.first().map_or(0, |&v| v.to_f64() as u64);
            }
        }
    }
}
