//! Adam with bias correction, operating on flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment state for one parameter group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, params: AdamParams) -> Adam {
        Adam {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update step; `values` and `grads` must match the state size.
    pub fn step(&mut self, values: &mut [f64], grads: &[f64]) -> Result<()> {
        if values.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Validation(format!(
                "Adam state holds {} parameters, got {} values / {} grads",
                self.m.len(),
                values.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= self.params.lr * m_hat / (v_hat.sqrt() + self.params.eps);
        }
        Ok(())
    }

    /// Keeps the state rows whose `keep` flag is set (after pruning).
    pub fn retain(&mut self, keep: &[bool], stride: usize) {
        debug_assert_eq!(keep.len() * stride, self.m.len());
        let mut w = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                for s in 0..stride {
                    self.m[w * stride + s] = self.m[i * stride + s];
                    self.v[w * stride + s] = self.v[i * stride + s];
                }
                w += 1;
            }
        }
        self.m.truncate(w * stride);
        self.v.truncate(w * stride);
    }
}
