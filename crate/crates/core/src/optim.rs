//! Stochastic gradient descent with momentum and the step-decay schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Momentum buffers plus the hyperparameters of the update rule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub momentum: Real,
    pub weight_decay: Real,
    pub base_lr: Real,
    /// Number of completed steps.
    pub iteration: usize,
    velocities: Vec<Vec<Real>>,
}

impl OptimizerState {
    /// Fresh state with zero velocity for each parameter.
    pub fn new(params: &[Tensor], momentum: Real, weight_decay: Real, base_lr: Real) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            base_lr,
            iteration: 0,
            velocities: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update: `v <- momentum*v + (grad + weight_decay*param)`,
    /// `param <- param - lr*v`. Parameters without an accumulated gradient
    /// are treated as having a zero gradient (weight decay still applies).
    pub fn step(&mut self, params: &mut [Tensor], lr: Real) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if params.len() != self.velocities.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocities.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            if p.numel() != v.len() {
                return Err(Error::Shape(format!(
                    "velocity of {} values cannot update parameter {:?}",
                    v.len(),
                    p.shape
                )));
            }
            for i in 0..v.len() {
                let g = p.grad.as_ref().map_or(0.0, |g| g[i]);
                v[i] = self.momentum * v[i] + (g + self.weight_decay * p.data[i]);
                p.data[i] -= lr * v[i];
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// Step-decay schedule: full rate for the first 70% of training, a tenth
/// until 90%, a hundredth afterward.
pub fn lr_schedule(iteration: usize, total: usize, base_lr: Real) -> Real {
    let t70 = total * 7 / 10;
    let t90 = total * 9 / 10;
    if iteration < t70 {
        base_lr
    } else if iteration < t90 {
        base_lr / 10.0
    } else {
        base_lr / 100.0
    }
}
