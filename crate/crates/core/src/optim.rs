//! SGD-with-momentum and Adam over lists of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_aligned(op: &'static str, params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.check_same_shape(op, g)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm clip applied to the gradient before the update.
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: Some(5.0),
        }
    }
}

/// Momentum buffers mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub momentum: Vec<Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            momentum: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// `buf ← μ·buf + (g + λ·w)`, `w ← w − lr·buf`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_aligned("sgd_step", params, grads)?;
        check_aligned("sgd_step", &self.momentum, grads)?;
        let clip = clip_factor(grads, self.config.grad_clip);
        let c = self.config;
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.momentum) {
            for ((w, &gv), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = gv * clip + c.weight_decay * *w;
                *b = c.momentum * *b + d;
                *w -= c.learning_rate * *b;
            }
        }
        Ok(())
    }
}

fn clip_factor(grads: &[Tensor], clip: Option<f64>) -> f64 {
    match clip {
        Some(max) => {
            let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
            if norm > max {
                max / (norm + 1e-6)
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Bias-corrected Adam update with L2 weight decay folded into the gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_aligned("adam_step", params, grads)?;
        check_aligned("adam_step", &self.first, grads)?;
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let d = gv + c.weight_decay * *w;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * d;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * d * d;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
