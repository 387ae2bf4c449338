//! AdamW with decoupled weight decay.
//!
//! Moments are kept in f64 regardless of the parameter precision so long
//! low-learning-rate runs do not lose mass to rounding. Weight decay is
//! applied directly to the parameters (decoupled), not folded into the
//! gradient, so a zero-gradient step shrinks weights by exactly
//! `1 − lr·λ`.

use relit_core::{CoreError, Result};
use relit_nn::{ParamStore, Real};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    /// Optimizer sized for `n_params` parameters. β = (0.9, 0.999),
    /// ε = 1e-8, λ = 0.01.
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients accumulated in `store`. Does not zero
    /// the gradients; callers own that.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(CoreError::Config(format!(
                "optimizer sized for {} params, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        let grads: Vec<f64> = store.grad().iter().map(|g| g.as_f64()).collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::Numeric("non-finite gradient in optimizer step".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let data = store.data_mut();
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let theta = data[i].as_f64();
            let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta;
            data[i] = T::from_f64(theta - self.lr * update);
        }
        Ok(())
    }
}
