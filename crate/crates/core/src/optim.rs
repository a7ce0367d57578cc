//! Adam with global-norm clipping and a warmup / inverse-sqrt schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear warmup to `peak` over `warmup` steps, then `peak * sqrt(warmup / step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
}

impl Schedule {
    /// Learning rate at 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.peak;
        }
        let w = self.warmup as f64;
        if s <= w {
            self.peak * s / w
        } else {
            self.peak * (w / s).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            schedule: Schedule {
                peak: 1e-3,
                warmup: 100,
            },
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
    /// Global norm of the gradient actually applied.
    pub applied_norm: f64,
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

impl OptimState {
    /// Zeroed moments for parameters of the given element counts.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        OptimState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one bias-corrected Adam update to `params` in place.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<StepStats> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: vec![p.len(), g.len()],
                    right: vec![m.len()],
                });
            }
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let lr = c.schedule.lr(self.step);
        let grad_norm = global_norm(grads);
        let factor = match c.clip_norm {
            Some(clip) if grad_norm > clip => clip / grad_norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi * factor;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(StepStats {
            lr,
            grad_norm,
            applied_norm: grad_norm * factor,
        })
    }
}

/// One Adam step over a flat list of tensors.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimState,
) -> Result<StepStats> {
    let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
    state.update(&mut refs, grads)
}
