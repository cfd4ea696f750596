//! Bias-corrected Adam.

use crate::error::{GastonError, Result};
use crate::numerics::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
/// Created empty and shaped on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl Adam {
    /// One update of every tensor in `params` using the matching entry of
    /// `grads`.
    pub fn step(&self, params: &mut [&mut Tensor2], grads: &[Tensor2], state: &mut AdamState) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GastonError::arg(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(GastonError::arg(format!(
                    "tensor {i}: parameter shape {:?} vs gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if state.m.is_empty() && state.step == 0 {
            state.m = params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
            state.v = state.m.clone();
        }
        if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
            return Err(GastonError::arg("optimizer state does not match parameter shapes"));
        }

        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            let pd = p.data_mut();
            for (((x, &gi), mi), vi) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
