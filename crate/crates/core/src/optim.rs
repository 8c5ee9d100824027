//! First-order optimizers over flat parameter blocks.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { mu: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Momentum { mu } if (0.0..1.0).contains(&mu) => Ok(()),
            OptimizerKind::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 =>
            {
                Ok(())
            }
            _ => Err(invalid("optimizer", alloc::format!("{self:?}"))),
        }
    }
}

/// Moment buffers for one parameter block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl BlockState {
    /// Applies one descent step `params -= lr * direction(grad)`.
    pub fn step(&mut self, kind: &OptimizerKind, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_len(params.len(), grad.len())?;
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.steps += 1;
        match *kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Momentum { mu } => {
                for i in 0..params.len() {
                    self.m[i] = mu * self.m[i] + grad[i];
                    params[i] -= lr * self.m[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as f64;
                let c1 = 1.0 - math::powf(beta1, t);
                let c2 = 1.0 - math::powf(beta2, t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    params[i] -= lr * (self.m[i] / c1) / (math::sqrt(self.v[i] / c2) + eps);
                }
            }
        }
        Ok(())
    }
}
