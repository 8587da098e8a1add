use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Scalar;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        params.check_same_layout(grads)?;
        params.check_same_layout(&self.m)?;
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("layout checked");
            let m = self.m.get_mut(name).expect("layout checked");
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + one_b1 * gi;
            }
            let v = self.v.get_mut(name).expect("layout checked");
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            let m = self.m.get(name).expect("layout checked");
            let v = self.v.get(name).expect("layout checked");
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi.as_f64() / bc1;
                let vhat = vi.as_f64() / bc2;
                let upd = c.lr * mhat / (vhat.sqrt() + c.eps);
                *pi = *pi - T::of(upd);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}
