//! Adam with bias correction and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update. Fails without touching anything when a gradient is not
    /// finite, naming the parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (name, (g, p)) in params.names().iter().zip(grads.iter().zip(params.tensors())) {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", format!("gradient of '{name}' is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::Diverged {
                    step: self.step as usize,
                    detail: format!("non-finite gradient for parameter '{name}'"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
