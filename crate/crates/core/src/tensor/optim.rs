use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Learning rate after `step` completed updates: `lr0 · (1 − step/total)`, floored at 0.
pub fn linear_decay_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    (lr0 * (1.0 - step as f64 / total_steps as f64)).max(0.0)
}

pub fn global_norm<'t>(grads: impl IntoIterator<Item = &'t Tensor>) -> f64 {
    grads.into_iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients jointly so their L2 norm is at most `max_norm`.
/// Returns the factor that was applied (1 when already within bounds).
pub fn clip_global_norm<'t>(grads: impl IntoIterator<Item = &'t mut Tensor>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let norm = global_norm(grads.iter().map(|g| &**g));
    if norm <= max_norm || !norm.is_finite() {
        return 1.0;
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= factor;
        }
    }
    factor
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: u64,
}

impl AdamConfig {
    pub fn new(lr: f64, total_steps: u64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
        }
    }
}

/// Adam moments per named parameter plus the linear-decay schedule position.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        linear_decay_lr(self.config.lr, self.step, self.config.total_steps)
    }

    /// One bias-corrected Adam update. `grads` is keyed like `params`;
    /// parameters without a gradient are treated as having a zero gradient.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let lr = self.current_lr();
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                }
            } else {
                for (mi, vi) in m.data_mut().iter_mut().zip(v.data_mut()) {
                    *mi *= beta1;
                    *vi *= beta2;
                }
            }
            if lr == 0.0 {
                continue;
            }
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
