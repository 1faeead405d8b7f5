use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor, TensorError};

pub const LR_MAX: f64 = 2e-4;
pub const LR_MIN: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { weight_decay: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// Per-parameter AdamW moments and the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
///
/// Parameters without a gradient entry are left untouched.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<(), TensorError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::Shape(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(TensorError::Shape(format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(name) {
                if t.shape() != p.shape() {
                    return Err(TensorError::Shape(format!("{name}: optimizer state {:?} vs param {:?}", t.shape(), p.shape())));
                }
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let decay = T::of(1.0 - lr * c.weight_decay);
    let step_size = T::of(lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(c.eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *pi *= decay;
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *pi -= step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> Result<f64, TensorError> {
        if step > self.total_steps {
            return Err(TensorError::ScheduleRange { step, total: self.total_steps });
        }
        if self.total_steps == 0 {
            return Ok(self.lr_max);
        }
        let progress = step as f64 / self.total_steps as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Schedule with the default endpoints `2e-4 -> 1e-7`.
pub fn cosine_lr(step: usize, total_steps: usize) -> Result<f64, TensorError> {
    CosineSchedule { lr_max: LR_MAX, lr_min: LR_MIN, total_steps }.lr_at(step)
}
