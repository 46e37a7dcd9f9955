//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::numerics::autodiff::ParamStore;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable parameter, in place. Moments are
    /// created lazily at zero and persist across steps.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                self.m.push(Tensor::zeros(p.value.shape().to_vec()));
                self.v.push(Tensor::zeros(p.value.shape().to_vec()));
            }
        }
        if self.m.len() != store.len() {
            return Err(Error::Optimizer(format!(
                "moment count {} does not match parameter count {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Optimizer(format!(
                    "non-finite gradient in parameter \"{}\" at flat index {i}",
                    p.name
                )));
            }
            let _ = id;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (_, p)) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors, exposed for checkpointing.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
