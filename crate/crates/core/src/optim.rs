//! AdamW with decoupled weight decay, and cosine annealing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `η_min + ½(η_max − η_min)(1 + cos(π t / T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: usize, total: usize, max_lr: f64, min_lr: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Range(format!("schedule step {t} beyond {total}")));
    }
    if total == 0 {
        return Ok(max_lr);
    }
    let progress = t as f64 / total as f64;
    Ok(min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub moments: Vec<(Vec<T>, Vec<T>)>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let moments = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
            .collect();
        Self { moments, step: 0 }
    }
}

impl AdamW {
    /// One update over paired parameter and gradient tensors:
    /// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
    pub fn step<T: Scalar>(
        &self,
        state: &mut OptimState<T>,
        params: Vec<&mut Tensor<T>>,
        grads: Vec<&Tensor<T>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.moments.len() {
            return Err(Error::dims(
                "adamw tensor count",
                &[params.len()],
                &[grads.len(), state.moments.len()],
            ));
        }
        for ((p, g), (m, _)) in params.iter().zip(&grads).zip(&state.moments) {
            if p.dims() != g.dims() || m.len() != p.len() {
                return Err(Error::dims("adamw", p.dims(), g.dims()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = T::cast(1.0 - self.beta1.powi(t));
        let bc2 = T::cast(1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::cast(self.beta1), T::cast(self.beta2));
        let (one, eps, lr, wd) = (T::one(), T::cast(self.eps), T::cast(lr), T::cast(weight_decay));
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(state.moments.iter_mut()) {
            for (((theta, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
            }
        }
        Ok(())
    }
}
