use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

use super::{Gradients, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias correction; moment buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                config.lr
            )));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || config.eps <= 0.0 {
            return Err(invalid("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(invalid(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        self.config.lr = lr;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter. Fails without touching anything
    /// if a parameter has no gradient.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<T>)>, grads: &Gradients<T>) -> Result<()> {
        for (name, p) in &params {
            let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            p.check_same_shape("adam", g)?;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (lr, eps, bc1, bc2) = (T::of(lr), T::of(eps), T::of(bc1), T::of(bc2));
        for (name, p) in params {
            let g = grads.get(&name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr` at epoch 0 to `lr · final_fraction` at the last
/// of `epochs` epochs.
pub fn cosine_lr(lr: f64, final_fraction: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    let floor = lr * final_fraction;
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
