use std::collections::HashMap;

use crate::tensor::{Param, Real, Tensor};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
}

/// AdamW with decoupled weight decay:
///
/// ```text
/// theta <- theta - lr * wd * theta
/// m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// Parameters without a gradient in the current step (or with
/// `requires_grad == false`) are skipped entirely: no decay, no moment
/// update, no step count.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    state: HashMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: HashMap::new(),
        }
    }

    /// Number of completed updates of parameter `name`.
    pub fn steps_of(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.step)
    }

    /// Applies one update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [(String, &mut Param<T>)], lr: f64) -> Result<(), TrainError> {
        for (name, p) in params.iter() {
            if p.requires_grad && p.has_grad() && !p.grad.all_finite() {
                return Err(TrainError::NonFinite(format!("gradient of {name}")));
            }
        }
        let c = self.config;
        let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
        let one = T::one();
        let lr_t = T::cast(lr);
        let decay = one - T::cast(lr * c.weight_decay);
        let eps = T::cast(c.eps);
        for (name, p) in params.iter_mut() {
            if !p.requires_grad || !p.has_grad() {
                continue;
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                step: 0,
            });
            st.step += 1;
            let bc1 = one - T::cast(c.beta1.powi(st.step as i32));
            let bc2 = one - T::cast(c.beta2.powi(st.step as i32));
            let grad = p.grad.data();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                theta[i] *= decay;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max` over `warmup` epochs, then cosine decay
/// reaching 0 at `total` epochs. `epoch` is fractional progress.
pub fn lr_schedule(epoch: f64, lr_max: f64, warmup: f64, total: f64) -> f64 {
    let e = epoch.clamp(0.0, total.max(0.0));
    if warmup > 0.0 && e < warmup {
        return lr_max * e / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 {
        return lr_max;
    }
    let t = ((e - warmup) / span).clamp(0.0, 1.0);
    (lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}
